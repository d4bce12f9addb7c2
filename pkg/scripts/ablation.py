"""Inversion ablations on the first task: pool diversity and L_norm descent.

    python3 scripts/ablation.py --out runs/ablation --seeds 0 1 2 --ablate rep
    python3 scripts/ablation.py --out runs/ablation --seeds 0 --alpha-rep 1000

For each seed the first configured task is pretrained (or reused from a
previous call), then inverted once with the full objective and once per
requested ablation under the same seed. Diversity is the mean pairwise
squared cosine of the final pool.
"""

import argparse
import csv
import logging
import time
from dataclasses import replace
from pathlib import Path

from invcoss import config as cfgmod
from invcoss import diffcore as dc
from invcoss.continual import inversion_config, stage_schedule, task_split
from invcoss.encoder import MimModel, frozen_copy, pretrain
from invcoss.evalkit import diversity
from invcoss.inversion import invert_task
from invcoss.stats import StatsArchive, capture_stats


def pretrained(cfg, task, root: Path):
    ckpt, stats = root / "checkpoint.ivcs", root / "stats.ivcs"
    if not ckpt.is_file():
        root.mkdir(parents=True, exist_ok=True)
        train, _ = task_split(cfg, task)
        model, _ = pretrain(MimModel(cfg.encoder, seed=cfg.seed), train.images, stage_schedule(cfg))
        model.save(ckpt)
        capture_stats(model, train.images, cfg.eval.stats_batch_size, task=task).save(stats)
    return frozen_copy(MimModel.load(ckpt)), StatsArchive.load(stats)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--ablate", nargs="+", default=["rep"], choices=["rep", "img", "cache"])
    ap.add_argument("--n", type=int, default=100, help="synthetic images per run")
    ap.add_argument("--alpha-rep", type=float, help="override the repulsion weight")
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    dc.configure_threads(1)
    base = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    if args.alpha_rep is not None:
        base = replace(base, inversion=replace(base.inversion, alpha_rep=args.alpha_rep))
    task = base.tasks[0].id
    out = Path(args.out)
    rows = []
    for seed in args.seeds:
        cfg = replace(base, seed=seed)
        frozen, archive = pretrained(cfg, task, out / f"seed{seed}" / "pretrain")
        for ab in [()] + [(a,) for a in args.ablate]:
            inv = replace(inversion_config(cfg), n_samples=args.n, ablate=frozenset(ab))
            t0 = time.time()
            res = invert_task(frozen, archive, inv, task=task)
            secs = time.time() - t0
            batches = sorted({r["batch"] for r in res.trace})
            worst = max(res.batch_norm_curve(b)[1] / res.batch_norm_curve(b)[0] for b in batches)
            div = diversity(res.pool.matrix())
            name = "full" if not ab else f"no-{ab[0]}"
            rows.append((seed, name, div, worst, secs))
            print(f"seed {seed} {name:8s} diversity {div:.4f}  worst L_norm final/initial {worst:.3f}  "
                  f"({secs:.0f} s)", flush=True)

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "variant", "diversity", "worst_norm_ratio", "seconds"])
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), f"{r[4]:.1f}"])


if __name__ == "__main__":
    main()
