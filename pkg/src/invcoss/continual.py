"""Task sequences: synthetic buffer construction and replay-regularized stage training.

Every artifact goes through a run directory so that a stage only ever sees
(a) its own raw training file and (b) earlier checkpoints + stats archives:

    <root>/data/<task>.train.ivcs    raw training images (deleted when purge_raw)
    <root>/data/<task>.heldout.ivcs  evaluation-only split
    <root>/stage<s>/checkpoint.ivcs  f_s
    <root>/stage<s>/stats.ivcs       per-block statistics of task s under f_s
    <root>/stage<s>/buffer.ivcs      synthetic replay used to train f_s (invcoss, s >= 1)
    <root>/stage<s>/buffer_manifest.csv
    <root>/stage<s>/loss.csv
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import bundle
from . import diffcore as dc
from .config import RunConfig, _inversion_kwargs
from .data import make_modality, split
from .encoder import MimModel, Schedule, eval_mim, frozen_copy, mim_forward, sample_masks, train_loop
from .inversion import InversionConfig, invert_task
from .stats import StatsArchive, capture_stats, check_fingerprint

log = logging.getLogger(__name__)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# Buffer
# ---------------------------------------------------------------------------

@dataclass
class SyntheticBuffer:
    """Synthetic images keyed by source task, in insertion order."""

    parts: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.parts.values())

    def add(self, task: str, images: np.ndarray) -> None:
        if task in self.parts:
            raise ValueError(f"buffer already holds task {task!r}")
        self.parts[task] = np.ascontiguousarray(images, dtype=np.float32)

    @property
    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.parts.items()}

    def images(self) -> np.ndarray:
        return np.concatenate([v for v in self.parts.values() if len(v)], axis=0)

    def tags(self) -> list[str]:
        return [k for k, v in self.parts.items() for _ in range(len(v))]

    def manifest(self) -> list[dict]:
        return [{"task": k, "count": len(v),
                 "sha256": hashlib.sha256(np.ascontiguousarray(v, dtype="<f4").tobytes()).hexdigest()}
                for k, v in self.parts.items()]

    def to_records(self) -> dict:
        recs: dict = {"meta.kind": "buffer", "meta.tasks": json.dumps(list(self.parts))}
        for k, v in self.parts.items():
            recs[f"task.{k}"] = v
        return recs

    @classmethod
    def from_records(cls, recs: dict) -> "SyntheticBuffer":
        buf = cls()
        for k in json.loads(recs["meta.tasks"].decode()):
            buf.add(k, recs[f"task.{k}"])
        return buf


@dataclass
class PreviousTask:
    """What a finished stage leaves behind: no raw data, only the model and its statistics."""

    task: str
    checkpoint: Path
    stats: Path


def build_buffer(previous: list[PreviousTask], ratio: float, inv: InversionConfig,
                 invert_with: str = "own", cache: dict | None = None) -> tuple[SyntheticBuffer, list[dict]]:
    """Invert every earlier task into round_half_up(ratio * |D_t|) synthetic images.

    ``invert_with="own"`` inverts task t through its own checkpoint f_t;
    ``"latest"`` uses the most recent checkpoint for all tasks. Returns the
    buffer and the concatenated inversion traces (with a ``task`` column).
    """
    buf = SyntheticBuffer()
    traces: list[dict] = []
    if not previous:
        return buf, traces
    latest = previous[-1].checkpoint
    for prev in previous:
        if not Path(prev.stats).is_file():
            raise FileNotFoundError(f"missing stats archive for previous task {prev.task!r}: {prev.stats}")
        archive = StatsArchive.load(prev.stats)
        ckpt = Path(prev.checkpoint if invert_with == "own" else latest)
        n_t = round_half_up(ratio * archive.count)
        key = (prev.task, _file_digest(ckpt), _file_digest(prev.stats), n_t, repr(inv))
        if cache is not None and key in cache:
            buf.add(prev.task, cache[key])
            continue
        frozen = frozen_copy(MimModel.load(ckpt))
        check_fingerprint(archive, frozen)
        if n_t == 0:
            images = np.zeros((0, frozen.config.channels, frozen.config.image_size,
                               frozen.config.image_size), dtype=np.float32)
        else:
            res = invert_task(frozen, archive, replace(inv, n_samples=n_t), task=prev.task)
            images = res.dataset.images
            traces.extend({"task": prev.task, **row} for row in res.trace)
        if cache is not None:
            cache[key] = images
        buf.add(prev.task, images)
    return buf, traces


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Stage training
# ---------------------------------------------------------------------------

def kd_loss(current: MimModel, frozen_prev: MimModel, x: torch.Tensor) -> torch.Tensor:
    """Mean squared gap between final-block features of the live and frozen models."""
    if current.config != frozen_prev.config:
        raise ValueError(f"kd_loss: architecture mismatch {current.config} vs {frozen_prev.config}")
    with torch.no_grad():
        target = frozen_prev.features(x)[-1]
    return (current.features(x)[-1] - target).square().mean()


@dataclass(frozen=True)
class StageConfig:
    schedule: Schedule = field(default_factory=Schedule)
    buffer_ratio: float = 0.05
    lambda_replay: float = 1.0
    lambda_kd: float = 0.1


def continual_stage(f_prev: MimModel, images: np.ndarray, buffer: SyntheticBuffer, cfg: StageConfig,
                    stream: str = "stage") -> tuple[MimModel, "object"]:
    """Train f_T initialised from ``f_prev`` on current data plus synthetic replay.

    Per step: MIM(current) + lambda_replay * MIM(synthetic) + lambda_kd * KD(synthetic).
    With an empty buffer this is plain sequential training.
    """
    model = copy.deepcopy(f_prev)
    for p in model.parameters():
        p.requires_grad_(True)
    extra = None
    if len(buffer):
        frozen = frozen_copy(f_prev)
        syn = torch.from_numpy(buffer.images())
        syn_bs = max(1, round_half_up(cfg.buffer_ratio * cfg.schedule.batch_size))
        grid, ratio = model.config.grid, cfg.schedule.mask_ratio

        def extra(step: int, gen: torch.Generator) -> dict[str, torch.Tensor]:
            xs = syn[torch.randint(len(syn), (syn_bs,), generator=gen)]
            _, l_syn = mim_forward(model, xs, sample_masks(len(xs), grid, ratio, gen))
            return {"replay": cfg.lambda_replay * l_syn, "kd": cfg.lambda_kd * kd_loss(model, frozen, xs)}

    trace = train_loop(model, images, cfg.schedule, extra, stream=stream)
    return model, trace


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------

@dataclass
class SequenceResult:
    root: Path
    regime: str
    tasks: list[str]
    checkpoints: list[Path]
    stats: list[Path]
    losses: np.ndarray  # [stages, tasks] held-out MIM loss
    buffer_manifests: list[Path]

    def final_loss(self, task: str) -> float:
        return float(self.losses[-1, self.tasks.index(task)])


def stage_schedule(cfg: RunConfig) -> Schedule:
    t = cfg.train
    return Schedule(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, warmup_frac=t.warmup_frac,
                    min_lr_frac=t.min_lr_frac, mask_ratio=t.mask_ratio, betas=tuple(t.betas), seed=cfg.seed)


def inversion_config(cfg: RunConfig) -> InversionConfig:
    return InversionConfig(**_inversion_kwargs(cfg.inversion), seed=cfg.seed)


def task_split(cfg: RunConfig, task_id: str):
    """Deterministic (train, held-out) datasets of one configured task."""
    t = next((t for t in cfg.tasks if t.id == task_id), None)
    if t is None:
        raise ValueError(f"unknown task {task_id!r}")
    ds = make_modality(t.modality(cfg.encoder), t.size + t.held_out)
    return split(ds, t.size / (t.size + t.held_out), dc.derive_seed(t.seed, "split") % (2**32))


def materialize_tasks(cfg: RunConfig, data_dir: Path) -> dict[str, tuple[Path, Path]]:
    """Write each task's train / held-out split into ``data_dir``; returns their paths."""
    data_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for t in cfg.tasks:
        train, held = task_split(cfg, t.id)
        tr_path, ho_path = data_dir / f"{t.id}.train.ivcs", data_dir / f"{t.id}.heldout.ivcs"
        bundle.write(tr_path, {"images": train.images, "labels": train.labels})
        bundle.write(ho_path, {"images": held.images, "labels": held.labels})
        paths[t.id] = (tr_path, ho_path)
    return paths


def _load_images(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"raw task data not found: {path}")
    return bundle.read(path)["images"]


def _write_loss_csv(path: Path, trace) -> None:
    extras = sorted(trace.extra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mim", *extras])
        for i, v in enumerate(trace.step_loss):
            w.writerow([i, repr(v), *[repr(trace.extra[k][i]) for k in extras]])


def _write_manifest(path: Path, buf: SyntheticBuffer) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "count", "sha256"])
        for row in buf.manifest():
            w.writerow([row["task"], row["count"], row["sha256"]])


def run_sequence(cfg: RunConfig, root: str | Path, regime: str | None = None,
                 task_order: list[str] | None = None, inversion_cache: dict | None = None,
                 data_paths: dict[str, tuple[Path, Path]] | None = None) -> SequenceResult:
    """Run every stage of ``regime`` over the configured tasks inside ``root``."""
    from .evalkit import retention_eval

    cfg.validate()
    regime = regime or cfg.continual.regime
    if regime not in ("invcoss", "seqssl", "joint"):
        raise ValueError(f"unknown regime {regime!r}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    by_id = {t.id: t for t in cfg.tasks}
    order = list(task_order) if task_order is not None else [t.id for t in cfg.tasks]
    missing = [t for t in order if t not in by_id]
    if missing or not order:
        raise ValueError(f"task order {order} references unknown tasks {missing}")
    if data_paths is None:
        data_paths = materialize_tasks(cfg, root / "data")
    held_out = {t: data_paths[t][1] for t in order}

    sched = stage_schedule(cfg)
    stage_cfg = StageConfig(sched, cfg.continual.buffer_ratio, cfg.continual.lambda_replay,
                            cfg.continual.lambda_kd)
    inv = inversion_config(cfg)
    base = MimModel(cfg.encoder, seed=cfg.seed)
    checkpoints, stats_paths, manifests = [], [], []

    if regime == "joint":
        images = np.concatenate([_load_images(data_paths[t][0]) for t in order], axis=0)
        sdir = root / "stage0"
        sdir.mkdir(exist_ok=True)
        model, trace = continual_stage(base, images, SyntheticBuffer(), stage_cfg, stream="stage0")
        model.save(sdir / "checkpoint.ivcs")
        _write_loss_csv(sdir / "loss.csv", trace)
        checkpoints.append(sdir / "checkpoint.ivcs")
    else:
        previous: list[PreviousTask] = []
        f_prev = base
        for s, task in enumerate(order):
            sdir = root / f"stage{s}"
            sdir.mkdir(exist_ok=True)
            buf = SyntheticBuffer()
            if regime == "invcoss" and previous:
                buf, inv_trace = build_buffer(previous, cfg.continual.buffer_ratio, inv,
                                              cfg.continual.invert_with, inversion_cache)
                bundle.write(sdir / "buffer.ivcs", buf.to_records())
                _write_manifest(sdir / "buffer_manifest.csv", buf)
                manifests.append(sdir / "buffer_manifest.csv")
                if inv_trace:
                    _write_inversion_trace(sdir / "inversion_trace.csv", inv_trace)
            images = _load_images(data_paths[task][0])
            log.info("stage %d (%s, %s): %d images, buffer %s", s, regime, task, len(images), buf.counts)
            model, trace = continual_stage(f_prev, images, buf, stage_cfg, stream=f"stage{s}")
            model.save(sdir / "checkpoint.ivcs")
            archive = capture_stats(model, images, cfg.eval.stats_batch_size, task=task)
            archive.save(sdir / "stats.ivcs")
            _write_loss_csv(sdir / "loss.csv", trace)
            del images
            if cfg.continual.purge_raw:
                data_paths[task][0].unlink()
            checkpoints.append(sdir / "checkpoint.ivcs")
            stats_paths.append(sdir / "stats.ivcs")
            previous.append(PreviousTask(task, sdir / "checkpoint.ivcs", sdir / "stats.ivcs"))
            f_prev = model

    matrix = retention_eval(checkpoints, held_out, order, cfg.eval.mask_seed, cfg.eval.mask_ratio)
    matrix.to_csv(root / "retention.csv")
    return SequenceResult(root, regime, order, checkpoints, stats_paths, matrix.losses, manifests)


def _write_inversion_trace(path: Path, rows: list[dict]) -> None:
    cols = ("task", "step", "batch", "L_task", "L_norm", "L_img", "L_rep", "total")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["task"], r["step"], r["batch"]] + [repr(float(r[c])) for c in cols[3:]])
