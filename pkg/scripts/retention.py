"""First-task retention after the last stage, for each regime and seed.

    python3 scripts/retention.py --out runs/retention --seeds 0 1 2
    python3 scripts/retention.py --out runs/reversed --reverse --regimes invcoss seqssl

Each run directory holds the usual stage checkpoints, stats and
retention.csv; a summary.csv with one row per (seed, regime) is written at
the top level.
"""

import argparse
import csv
import logging
import time
from dataclasses import replace
from pathlib import Path

from invcoss import config as cfgmod
from invcoss import diffcore as dc
from invcoss.continual import run_sequence


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", help="YAML run config (defaults to the desk config)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--regimes", nargs="+", default=["seqssl", "invcoss", "joint"])
    ap.add_argument("--reverse", action="store_true", help="run the tasks in reverse order")
    ap.add_argument("--size", type=int, help="override per-task training size")
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    dc.configure_threads(1)
    base = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    if args.size:
        base = replace(base, tasks=tuple(replace(t, size=args.size) for t in base.tasks))
    order = [t.id for t in base.tasks]
    if args.reverse:
        order = order[::-1]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = {}
    rows = []
    for seed in args.seeds:
        cfg = replace(base, seed=seed)
        first = {}
        for regime in args.regimes:
            t0 = time.time()
            res = run_sequence(cfg, out / f"seed{seed}" / regime, regime=regime, task_order=order,
                               inversion_cache=cache)
            first[regime] = res.final_loss(order[0])
            rows.append((seed, regime, order[0], first[regime], time.time() - t0))
            print(f"seed {seed} {regime:8s} {order[0]} loss {first[regime]:.5f} ({time.time() - t0:.0f} s)",
                  flush=True)
        if "invcoss" in first and "seqssl" in first:
            margin = 1 - first["invcoss"] / first["seqssl"]
            print(f"seed {seed} margin over seqssl {margin:+.1%}")
        if "invcoss" in first and "joint" in first:
            print(f"seed {seed} invcoss / joint {first['invcoss'] / first['joint']:.3f}")

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "regime", "task", "final_loss", "seconds"])
        for seed, regime, task, loss, secs in rows:
            w.writerow([seed, regime, task, repr(loss), f"{secs:.1f}"])


if __name__ == "__main__":
    main()
