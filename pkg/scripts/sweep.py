"""Synthetic-buffer size sweep against the sequential baseline.

    python3 scripts/sweep.py --out runs/sweep --seed 0 --ratios 0.01 0.05 0.10
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from invcoss import config as cfgmod
from invcoss import diffcore as dc
from invcoss.continual import run_sequence
from invcoss.evalkit import sample_size_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ratios", type=float, nargs="+", default=[0.01, 0.05, 0.10])
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    dc.configure_threads(1)
    base = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    cfg = replace(base, seed=args.seed)
    out = Path(args.out)
    first = cfg.tasks[0].id

    seq = run_sequence(cfg, out / "seqssl", regime="seqssl").final_loss(first)
    print(f"seqssl  {first} loss {seq:.5f}")
    for r, m in sample_size_sweep(cfg, args.ratios, out, inversion_cache={}).items():
        loss = m.loss(m.stages - 1, first)
        print(f"ratio {r:5.2f} {first} loss {loss:.5f}  margin over seqssl {1 - loss / seq:+.1%}", flush=True)


if __name__ == "__main__":
    main()
