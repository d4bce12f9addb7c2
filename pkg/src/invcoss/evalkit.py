"""Retention matrices, pool diversity, linear probes, storage accounting and buffer-size sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bundle
from .encoder import MimModel, eval_mim


@dataclass
class RetentionMatrix:
    """Held-out MIM loss of the stage-``s`` checkpoint on task ``t``'s held-out split."""

    tasks: list[str]
    losses: np.ndarray  # [stages, tasks]

    @property
    def stages(self) -> int:
        return self.losses.shape[0]

    def loss(self, stage: int, task: str) -> float:
        return float(self.losses[stage, self.tasks.index(task)])

    def forgetting(self, task: str) -> float:
        """Final-stage loss minus the loss right after the task's own stage."""
        t = self.tasks.index(task)
        own = min(t, self.stages - 1)
        return float(self.losses[-1, t] - self.losses[own, t])

    def rows(self) -> list[tuple[int, str, float]]:
        return [(s, t, float(self.losses[s, j])) for s in range(self.stages) for j, t in enumerate(self.tasks)]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "task", "loss"])
            for s, t, v in self.rows():
                w.writerow([s, t, repr(v)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "RetentionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        tasks = list(dict.fromkeys(r["task"] for r in rows))
        stages = max(int(r["stage"]) for r in rows) + 1 if rows else 0
        losses = np.full((stages, len(tasks)), np.nan)
        for r in rows:
            losses[int(r["stage"]), tasks.index(r["task"])] = float(r["loss"])
        return cls(tasks, losses)


def retention_eval(checkpoints: list[str | Path], held_out: dict[str, str | Path], order: list[str],
                   mask_seed: int, mask_ratio: float = 0.75) -> RetentionMatrix:
    """Evaluate every stage checkpoint on every task's held-out split.

    Every cell for a given task uses the same masks (seeded by ``mask_seed``),
    so columns are directly comparable across stages and regimes.
    """
    if not checkpoints:
        raise ValueError("retention_eval: no checkpoints")
    missing = [t for t in order if t not in held_out or not Path(held_out[t]).is_file()]
    if missing:
        raise FileNotFoundError(f"retention_eval: missing held-out split for {missing}")
    sets = {t: bundle.read(held_out[t])["images"] for t in order}
    losses = np.zeros((len(checkpoints), len(order)))
    for s, ck in enumerate(checkpoints):
        model = MimModel.load(ck)
        for j, t in enumerate(order):
            losses[s, j] = eval_mim(model, sets[t], mask_ratio, mask_seed)
    return RetentionMatrix(list(order), losses)


def diversity(rows) -> float:
    """Mean squared cosine similarity over unordered pairs of rows (lower is more diverse)."""
    h = np.asarray(rows, dtype=np.float64)
    if h.ndim != 2 or len(h) < 2:
        raise ValueError(f"diversity: need at least 2 feature rows, got shape {h.shape}")
    norms = np.linalg.norm(h, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"diversity: zero-norm row at index {int(np.argmin(norms))}")
    u = h / norms[:, None]
    cos2 = (u @ u.T) ** 2
    n = len(h)
    return float((cos2.sum() - np.trace(cos2)) / (n * (n - 1)))


def linear_probe(train_x, train_y, test_x, test_y, ridge: float = 1e-3) -> float:
    """Test accuracy of a one-vs-rest ridge-regression classifier on standardized features."""
    xa, xb = np.asarray(train_x, dtype=np.float64), np.asarray(test_x, dtype=np.float64)
    ya, yb = np.asarray(train_y), np.asarray(test_y)
    if xa.ndim != 2 or xb.ndim != 2 or xa.shape[1] != xb.shape[1] or len(xa) != len(ya) or len(xb) != len(yb):
        raise ValueError(f"linear_probe: mismatched shapes {xa.shape}/{ya.shape} vs {xb.shape}/{yb.shape}")
    classes = np.unique(ya)
    mu, sd = xa.mean(axis=0), xa.std(axis=0) + 1e-8

    def design(x):
        return np.hstack([(x - mu) / sd, np.ones((len(x), 1))])

    a = design(xa)
    targets = (ya[:, None] == classes[None, :]).astype(np.float64)
    w = np.linalg.solve(a.T @ a + ridge * len(a) * np.eye(a.shape[1]), a.T @ targets)
    pred = classes[np.argmax(design(xb) @ w, axis=1)]
    return float(np.mean(pred == yb))


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StorageRow:
    task: str
    stats_bytes: int
    raw_bytes: int
    raw_count: int

    @property
    def ratio(self) -> float:
        return self.raw_bytes / self.stats_bytes


@dataclass
class StorageReport:
    rows: list[StorageRow] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "stats_bytes", "raw_count", "raw_bytes", "ratio"])
            for r in self.rows:
                w.writerow([r.task, r.stats_bytes, r.raw_count, r.raw_bytes, repr(r.ratio)])


def write_raw_buffer(path: str | Path, images: np.ndarray, ratio: float) -> int:
    """Serialize what a data-replay method would keep: the first round(ratio*n) raw images."""
    n = int(math.floor(ratio * len(images) + 0.5))
    bundle.write(path, {"images": np.ascontiguousarray(images[:n], dtype=np.float32)})
    return n


def storage_report(entries: list[tuple[str, str | Path, str | Path]]) -> StorageReport:
    """``entries`` are (task, stats archive path, raw buffer path); sizes are read from disk."""
    report = StorageReport()
    for task, stats_path, raw_path in entries:
        for p in (stats_path, raw_path):
            if not Path(p).is_file():
                raise FileNotFoundError(f"storage_report: missing file {p}")
        raw = bundle.read(raw_path)["images"]
        report.rows.append(StorageRow(task, Path(stats_path).stat().st_size,
                                      Path(raw_path).stat().st_size, len(raw)))
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_RATIOS = (0.01, 0.05, 0.10)


def sample_size_sweep(cfg, ratios=SWEEP_RATIOS, root: str | Path = "sweep", regime: str = "invcoss",
                      inversion_cache: dict | None = None) -> dict[float, RetentionMatrix]:
    """One ``run_sequence`` per buffer ratio under shared seeds; writes ``sweep.csv``."""
    from .continual import run_sequence

    ratios = list(ratios)
    bad = [r for r in ratios if not 0.0 < r <= 1.0]
    if bad or not ratios:
        raise ValueError(f"sample_size_sweep: ratios must lie in (0, 1], got {ratios}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out: dict[float, RetentionMatrix] = {}
    for r in ratios:
        run_cfg = replace(cfg, continual=replace(cfg.continual, buffer_ratio=float(r)))
        res = run_sequence(run_cfg, root / f"ratio-{r:g}", regime=regime, inversion_cache=inversion_cache)
        out[r] = RetentionMatrix(res.tasks, res.losses)
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "stage", "task", "loss"])
        for r, m in out.items():
            for s, t, v in m.rows():
                w.writerow([repr(float(r)), s, t, repr(v)])
    return out
