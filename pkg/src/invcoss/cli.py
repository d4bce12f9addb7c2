"""Command-line entry point.

    invcoss pretrain --config run.yaml --out runs/pre
    invcoss invert --checkpoint ck.ivcs --stats st.ivcs --out runs/inv [--ablate rep]
    invcoss continual --config run.yaml --out runs/seq [--regime seqssl] [--ratio 0.01]
    invcoss eval runs/seq --out runs/seq/eval
    invcoss storage-report runs/seq --out runs/seq/storage

Exit codes: 2 config error, 3 numeric abort, 4 fingerprint mismatch,
5 missing artifact, 6 run directory locked by another process.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import fcntl
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import diffcore as dc
from .config import ConfigError, RunConfig
from .diffcore import NumericError
from .stats import FingerprintMismatch

log = logging.getLogger("invcoss")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_FINGERPRINT, EXIT_MISSING, EXIT_LOCKED = 2, 3, 4, 5, 6


class MissingArtifact(FileNotFoundError):
    pass


class RunLocked(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def run_directory(out: Path, cfg: RunConfig | None):
    """Lock ``out``, echo the effective config, and leave a FAILED sentinel on error."""
    out.mkdir(parents=True, exist_ok=True)
    lock = open(out / ".lock", "w")
    try:
        fcntl.flock(lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        lock.close()
        raise RunLocked(f"{out} is in use by another invcoss process") from None
    sentinel = out / "FAILED"
    sentinel.unlink(missing_ok=True)
    try:
        if cfg is not None:
            (out / "config.yaml").write_text(cfgmod.dump(cfg))
        yield out
    except BaseException as exc:
        sentinel.write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    finally:
        fcntl.flock(lock, fcntl.LOCK_UN)
        lock.close()


def effective_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "regime", None):
        cfg = dataclasses.replace(cfg, continual=dataclasses.replace(cfg.continual, regime=args.regime))
    if getattr(args, "ratio", None) is not None:
        cfg = dataclasses.replace(cfg, continual=dataclasses.replace(cfg.continual, buffer_ratio=args.ratio))
    if getattr(args, "ablate", None):
        merged = tuple(sorted(set(cfg.inversion.ablate) | set(args.ablate)))
        cfg = dataclasses.replace(cfg, inversion=dataclasses.replace(cfg.inversion, ablate=merged))
    if getattr(args, "preview_cap", None) is not None:
        cfg = dataclasses.replace(cfg, inversion=dataclasses.replace(cfg.inversion, preview_cap=args.preview_cap))
    cfg.validate()
    return cfg


def _require(*paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise MissingArtifact(f"missing artifact: {p}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    from .continual import stage_schedule, task_split, _write_loss_csv
    from .encoder import MimModel, pretrain
    from .stats import capture_stats

    cfg = effective_config(args)
    task = args.task or cfg.tasks[0].id
    if task not in {t.id for t in cfg.tasks}:
        raise ConfigError(f"--task {task!r} is not among the configured tasks")
    with run_directory(Path(args.out), cfg) as out:
        train, _ = task_split(cfg, task)
        model, trace = pretrain(MimModel(cfg.encoder, seed=cfg.seed), train.images, stage_schedule(cfg))
        model.save(out / "checkpoint.ivcs")
        capture_stats(model, train.images, cfg.eval.stats_batch_size, task=task).save(out / "stats.ivcs")
        _write_loss_csv(out / "loss.csv", trace)
        log.info("pretrained %s: final epoch loss %.5f", task, trace.epoch_loss[-1])
    return 0


def cmd_invert(args) -> int:
    from . import bundle
    from .continual import inversion_config
    from .encoder import MimModel, frozen_copy
    from .inversion import invert_task, write_pgm, write_trace
    from .stats import StatsArchive, check_fingerprint

    cfg = effective_config(args)
    _require(args.checkpoint, args.stats)
    archive = StatsArchive.load(args.stats)
    frozen = frozen_copy(MimModel.load(args.checkpoint))
    check_fingerprint(archive, frozen)
    inv = inversion_config(cfg)
    if args.n is not None:
        inv = dataclasses.replace(inv, n_samples=args.n)
    with run_directory(Path(args.out), cfg) as out:
        res = invert_task(frozen, archive, inv, task=archive.task)
        bundle.write(out / "synthetic.ivcs", {"images": res.dataset.images, "meta.task": archive.task})
        write_trace(out / "trace.csv", res.trace)
        previews = out / "previews"
        previews.mkdir(exist_ok=True)
        for old in previews.glob("*.pgm"):
            old.unlink()
        for i in range(min(len(res.dataset), cfg.inversion.preview_cap, 16)):
            write_pgm(previews / f"{i:03d}.pgm", res.dataset.images[i])
    return 0


def cmd_continual(args) -> int:
    from .continual import run_sequence

    cfg = effective_config(args)
    order = args.order.split(",") if args.order else None
    with run_directory(Path(args.out), cfg) as out:
        res = run_sequence(cfg, out, task_order=order)
        _storage(cfg, out, out / "storage")
        log.info("final held-out losses: %s", dict(zip(res.tasks, res.losses[-1].round(5).tolist())))
    return 0


def _run_config(run: Path) -> RunConfig:
    path = run / "config.yaml"
    if not path.is_file():
        raise MissingArtifact(f"missing artifact: {path}")
    return cfgmod.load(path)


def _stage_dirs(run: Path) -> list[Path]:
    dirs = [d for d in run.glob("stage*") if d.is_dir() and d.name[5:].isdigit()]
    return sorted(dirs, key=lambda d: int(d.name[5:]))


def cmd_eval(args) -> int:
    from .evalkit import retention_eval

    if not args.runs:
        raise MissingArtifact("eval: no run directories given")
    for run in map(Path, args.runs):
        cfg = _run_config(run)
        checkpoints = [d / "checkpoint.ivcs" for d in _stage_dirs(run)]
        if not checkpoints:
            raise MissingArtifact(f"eval: no stage checkpoints under {run}")
        _require(*checkpoints)
        order = _task_order(run, cfg)
        held = {t: run / "data" / f"{t}.heldout.ivcs" for t in order}
        _require(*held.values())
        out = Path(args.out) if args.out and len(args.runs) == 1 else run / "eval"
        with run_directory(out, None):
            retention_eval(checkpoints, held, order, cfg.eval.mask_seed, cfg.eval.mask_ratio).to_csv(
                out / "retention.csv")
    return 0


def _task_order(run: Path, cfg: RunConfig) -> list[str]:
    import csv

    path = run / "retention.csv"
    if path.is_file():
        with open(path, newline="") as fh:
            return list(dict.fromkeys(r["task"] for r in csv.DictReader(fh)))
    return [t.id for t in cfg.tasks]


def _storage(cfg: RunConfig, run: Path, out: Path):
    from . import bundle
    from .continual import task_split
    from .evalkit import storage_report, write_raw_buffer
    from .stats import StatsArchive

    entries = []
    out.mkdir(parents=True, exist_ok=True)
    for d in _stage_dirs(run):
        stats = d / "stats.ivcs"
        if not stats.is_file():
            continue
        task = StatsArchive.load(stats).task
        raw_file = run / "data" / f"{task}.train.ivcs"
        images = bundle.read(raw_file)["images"] if raw_file.is_file() else task_split(cfg, task)[0].images
        raw = out / f"{task}.raw-buffer.ivcs"
        write_raw_buffer(raw, images, cfg.continual.buffer_ratio)
        entries.append((task, stats, raw))
    report = storage_report(entries)
    report.to_csv(out / "storage.csv")
    return report


def cmd_storage_report(args) -> int:
    if not args.runs:
        raise MissingArtifact("storage-report: no run directories given")
    for run in map(Path, args.runs):
        cfg = _run_config(run)
        if args.ratio is not None:
            cfg = dataclasses.replace(cfg, continual=dataclasses.replace(cfg.continual, buffer_ratio=args.ratio))
        if not any((d / "stats.ivcs").is_file() for d in _stage_dirs(run)):
            raise MissingArtifact(f"storage-report: no stats archives under {run}")
        out = Path(args.out) if args.out and len(args.runs) == 1 else run / "storage"
        with run_directory(out, None):
            _storage(cfg, run, out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invcoss", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="YAML run config (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", type=Path, required=out_required, help="run directory")

    sp = sub.add_parser("pretrain", help="train one task's encoder and capture its statistics")
    common(sp)
    sp.add_argument("--task", help="task id (default: first configured task)")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("invert", help="synthesize images from a checkpoint and its stats archive")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--stats", type=Path, required=True)
    sp.add_argument("--n", type=int, help="number of images (default: inversion.n_samples)")
    sp.add_argument("--ablate", action="append", choices=["img", "rep", "cache"], default=[])
    sp.add_argument("--preview-cap", type=int, dest="preview_cap")
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("continual", help="run a task sequence")
    common(sp)
    sp.add_argument("--regime", choices=list(cfgmod.REGIMES))
    sp.add_argument("--ratio", type=float, help="synthetic buffer ratio")
    sp.add_argument("--ablate", action="append", choices=["img", "rep", "cache"], default=[])
    sp.add_argument("--order", help="comma-separated task ids")
    sp.set_defaults(func=cmd_continual)

    sp = sub.add_parser("eval", help="recompute the retention matrix of finished runs")
    sp.add_argument("runs", nargs="*", type=Path)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("storage-report", help="stats-archive bytes versus raw replay bytes")
    sp.add_argument("runs", nargs="*", type=Path)
    sp.add_argument("--out", type=Path)
    sp.add_argument("--ratio", type=float)
    sp.set_defaults(func=cmd_storage_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    dc.configure_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invcoss: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"invcoss: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FingerprintMismatch as exc:
        print(f"invcoss: fingerprint mismatch: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except FileNotFoundError as exc:
        print(f"invcoss: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except RunLocked as exc:
        print(f"invcoss: {exc}", file=sys.stderr)
        return EXIT_LOCKED


if __name__ == "__main__":
    sys.exit(main())
