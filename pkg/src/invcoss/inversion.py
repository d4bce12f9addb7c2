"""Data-free inversion of a frozen MIM model into a synthetic dataset."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import diffcore as dc
from .diffcore import NumericError, ShapeError
from .encoder import MimModel, mim_forward, sample_masks
from .invunet import GeneratorConfig, InvUNet, reinit, sample_latents
from .stats import StatsArchive, check_fingerprint, norm_loss

TRACE_COLUMNS = ("step", "batch", "L_task", "L_norm", "L_img", "L_rep", "total")
ABLATIONS = frozenset({"img", "rep", "cache"})


@dataclass(frozen=True)
class InversionConfig:
    alpha_norm: float = 1.0
    alpha_img: float = 0.1
    alpha_rep: float = 0.1
    steps: int = 300
    batch_size: int = 32
    n_samples: int = 100
    lr_generator: float = 2e-4
    lr_latent: float = 0.05
    reinit_every: int = 1
    mask_ratio: float = 0.75
    seed: int = 0
    ablate: frozenset = frozenset()
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def validate(self) -> None:
        if min(self.alpha_norm, self.alpha_img, self.alpha_rep) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.steps < 1 or self.batch_size < 1 or self.n_samples < 0 or self.reinit_every < 1:
            raise ValueError("steps, batch_size, reinit_every must be >= 1 and n_samples >= 0")
        if self.lr_generator <= 0 or self.lr_latent <= 0:
            raise ValueError("learning rates must be > 0")
        unknown = set(self.ablate) - ABLATIONS
        if unknown:
            raise ValueError(f"unknown ablation(s) {sorted(unknown)}; choose from {sorted(ABLATIONS)}")
        self.generator.validate()

    @property
    def weights(self) -> tuple[float, float, float]:
        a_img = 0.0 if "img" in self.ablate else self.alpha_img
        a_rep = 0.0 if "rep" in self.ablate else self.alpha_rep
        return self.alpha_norm, a_img, a_rep

    def generator_config(self) -> GeneratorConfig:
        if "cache" in self.ablate:
            return replace(self.generator, use_cache=False)
        return self.generator


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def tv_loss(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation: per-image sum of |vertical| + |horizontal| steps, batch mean."""
    if x.dim() != 4:
        raise ShapeError("tv_loss", x.shape, detail="expected [B, C, H, W]")
    dv = dc.abs(x[:, :, 1:, :] - x[:, :, :-1, :]).sum(dim=(1, 2, 3))
    dh = dc.abs(x[:, :, :, 1:] - x[:, :, :, :-1]).sum(dim=(1, 2, 3))
    return (dv + dh).mean()


@dataclass
class FeaturePool:
    capacity: int
    dim: int
    rows: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(r) for r in self.rows)

    def matrix(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.concatenate(self.rows, axis=0)

    def extend(self, feats: np.ndarray) -> None:
        feats = np.asarray(feats, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise ShapeError("FeaturePool.extend", feats.shape, (-1, self.dim))
        if not np.isfinite(feats).all():
            raise NumericError("FeaturePool.extend: non-finite feature rows")
        room = self.capacity - len(self)
        if room > 0:
            self.rows.append(feats[:room].copy())


def _unit_rows(h: torch.Tensor, what: str) -> torch.Tensor:
    norms = h.norm(dim=1)
    bad = (norms == 0).nonzero()
    if len(bad):
        raise ValueError(f"{what}: row {int(bad[0])} has zero norm (degenerate encoder output)")
    return h / norms.unsqueeze(1)


def repulsive_loss(h: torch.Tensor, pool: FeaturePool | np.ndarray | torch.Tensor) -> torch.Tensor:
    """Mean squared cosine similarity between batch features and (detached) pool rows."""
    p = pool.matrix() if isinstance(pool, FeaturePool) else pool
    p = torch.as_tensor(np.asarray(p) if not torch.is_tensor(p) else p.detach(), dtype=h.dtype)
    if len(p) == 0:
        return h.sum() * 0.0
    if h.dim() != 2 or p.shape[1] != h.shape[1]:
        raise ShapeError("repulsive_loss", h.shape, p.shape)
    cos = dc.matmul(_unit_rows(h, "repulsive_loss batch"), _unit_rows(p, "repulsive_loss pool").T)
    return cos.square().mean()


def represent(feats: list[torch.Tensor], archive: StatsArchive) -> torch.Tensor:
    """Representation used for repulsion and diversity.

    Final-block tokens minus the archived per-token training mean, flattened to
    [B, L*d]. Uncentred features share a large common offset (pairwise cos^2
    near 0.98 even on real images), which leaves repulsion nothing to act on.
    """
    f = feats[-1]
    mu = torch.as_tensor(archive.layers[-1].mean, dtype=f.dtype)
    return (f - mu).flatten(1)


def pool_dim(model: MimModel) -> int:
    return model.config.tokens * model.config.dim


def pool_features(model: MimModel, x: torch.Tensor, archive: StatsArchive) -> torch.Tensor:
    return represent(model.features(x), archive)


def inversion_objective(g: InvUNet, z: torch.Tensor, frozen: MimModel, archive: StatsArchive,
                        pool: FeaturePool, cfg: InversionConfig, mask_gen: torch.Generator
                        ) -> tuple[torch.Tensor, dict[str, float], torch.Tensor]:
    """Weighted four-term loss on G(z). Returns (loss, breakdown, images)."""
    check_fingerprint(archive, frozen)
    a_norm, a_img, a_rep = cfg.weights
    x = g(z)
    mask = sample_masks(x.shape[0], frozen.config.grid, cfg.mask_ratio, mask_gen)
    _, l_task = mim_forward(frozen, x, mask)
    feats = frozen.features(x)
    l_norm = norm_loss(feats, archive)
    l_img = tv_loss(x)
    l_rep = repulsive_loss(represent(feats, archive), pool)
    total = l_task + a_norm * l_norm + a_img * l_img + a_rep * l_rep
    parts = {"L_task": l_task, "L_norm": l_norm, "L_img": l_img, "L_rep": l_rep, "total": total}
    breakdown = {k: float(v.item()) for k, v in parts.items()}
    bad = [k for k, v in breakdown.items() if not math.isfinite(v)]
    if bad:
        raise NumericError(f"inversion objective: non-finite {bad}", **breakdown)
    return total, breakdown, x


# ---------------------------------------------------------------------------
# Synthesis loop
# ---------------------------------------------------------------------------

@dataclass
class SyntheticDataset:
    images: np.ndarray  # [N, c, H, W] float32 in (0, 1)
    task: str = ""

    def __len__(self) -> int:
        return len(self.images)

    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.images, dtype="<f4").tobytes()).hexdigest()


@dataclass
class InversionResult:
    dataset: SyntheticDataset
    pool: FeaturePool
    trace: list[dict]

    def batch_norm_curve(self, batch: int) -> tuple[float, float]:
        rows = [r for r in self.trace if r["batch"] == batch]
        return rows[0]["L_norm"], rows[-1]["L_norm"]


def invert_task(frozen: MimModel, archive: StatsArchive, cfg: InversionConfig, task: str = "",
                pool: FeaturePool | None = None) -> InversionResult:
    """Synthesize ``cfg.n_samples`` images from ``frozen`` guided by ``archive``."""
    cfg.validate()
    check_fingerprint(archive, frozen)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    gcfg = cfg.generator_config()
    if gcfg.out_size != frozen.config.image_size or gcfg.out_channels != frozen.config.channels:
        raise ShapeError("invert_task", (gcfg.out_channels, gcfg.out_size, gcfg.out_size),
                         (frozen.config.channels, frozen.config.image_size, frozen.config.image_size))
    if pool is None:
        pool = FeaturePool(cfg.n_samples, pool_dim(frozen))
    gen = dc.generator(cfg.seed, "inversion", task)
    min_batch = 2 if gcfg.norm == "batch" else 1
    g = InvUNet(gcfg, gen)
    out, trace = [], []
    made, batch, step = 0, 0, 0
    while made < cfg.n_samples:
        want = min(cfg.batch_size, cfg.n_samples - made)
        bsz = max(want, min_batch)
        z = sample_latents(bsz, gcfg.latent_dim, gen)
        if batch > 0 and batch % cfg.reinit_every == 0:
            g, z = reinit(g, z, gen)
        z.requires_grad_(True)
        opt_g = dc.Adam(g.named_parameters(), lr=cfg.lr_generator)
        opt_z = dc.Adam([("z", z)], lr=cfg.lr_latent)
        g.train()
        for _ in range(cfg.steps):
            try:
                loss, parts, _ = inversion_objective(g, z, frozen, archive, pool, cfg, gen)
            except NumericError as exc:
                raise NumericError(f"batch {batch} aborted: {exc}", step=step, batch=batch) from exc
            trace.append({"step": step, "batch": batch, **parts})
            opt_g.zero_grad()
            opt_z.zero_grad()
            dc.backward(loss)
            opt_g.step()
            opt_z.step()
            step += 1
        with torch.no_grad():
            images = g(z)[:want]
            feats = pool_features(frozen, images, archive)
        pool.extend(feats.numpy())
        out.append(images.numpy().astype(np.float32))
        made += want
        batch += 1
    images = np.concatenate(out, axis=0) if out else np.zeros(
        (0, gcfg.out_channels, gcfg.out_size, gcfg.out_size), dtype=np.float32)
    return InversionResult(SyntheticDataset(images, task), pool, trace)


def write_trace(path: str | Path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["step"], row["batch"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[2:]])


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM (1 channel) or PPM (3 channels), round-half-up quantization."""
    img = np.asarray(image, dtype=np.float64)
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    c, h, w = q.shape
    if c == 1:
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q[0].tobytes())
    elif c == 3:
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes())
    else:
        raise ShapeError("write_pgm", q.shape, detail="need 1 or 3 channels")
