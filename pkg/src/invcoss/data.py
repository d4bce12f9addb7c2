"""Procedural toy modalities standing in for distinct imaging domains."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

KINDS = ("blobs", "stripes", "checker-noise")


@dataclass(frozen=True)
class ModalitySpec:
    kind: str = "blobs"
    resolution: int = 32
    channels: int = 1
    blob_count: tuple[int, int] = (1, 4)
    blob_width: tuple[float, float] = (2.0, 5.0)
    stripe_frequency: tuple[float, float] = (1.0, 3.0)  # cycles per image
    stripe_angle: tuple[float, float] = (0.0, 0.0)  # degrees; oblique gratings do not train at desk scale
    checker_cell: tuple[int, int] = (2, 8)
    noise_scale: tuple[float, float] = (0.05, 0.15)
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown modality kind {self.kind!r}; expected one of {KINDS}")
        if self.resolution < 2 or self.channels < 1:
            raise ValueError(f"bad resolution/channels: {self.resolution}/{self.channels}")
        for name in ("blob_count", "blob_width", "stripe_frequency", "stripe_angle", "checker_cell", "noise_scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range [{lo}, {hi}]")
        if self.blob_count[0] < 1 or self.blob_width[0] <= 0 or self.checker_cell[0] < 1:
            raise ValueError("blob_count, blob_width and checker_cell must be positive")
        if self.noise_scale[0] < 0 or self.stripe_frequency[0] <= 0:
            raise ValueError("noise_scale must be >= 0 and stripe_frequency > 0")


@dataclass
class ToyDataset:
    """Images [n, c, H, W] in [0, 1] plus probe-only labels."""

    images: np.ndarray
    labels: np.ndarray
    kind: str = ""
    indices: np.ndarray = field(default=None)  # positions in the parent dataset

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(len(self.images))

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "ToyDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ToyDataset(self.images[idx], self.labels[idx], self.kind, self.indices[idx])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def _grid(res: int):
    yy, xx = np.meshgrid(np.arange(res, dtype=np.float64), np.arange(res, dtype=np.float64), indexing="ij")
    return yy, xx


def _blobs(spec: ModalitySpec, rng: np.random.Generator):
    yy, xx = _grid(spec.resolution)
    count = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    img = np.zeros((spec.resolution, spec.resolution))
    for _ in range(count):
        cy, cx = rng.uniform(0, spec.resolution - 1, size=2)
        width = rng.uniform(*spec.blob_width)
        amp = rng.uniform(0.7, 1.0)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return np.clip(img, 0.0, 1.0), count


def _stripes(spec: ModalitySpec, rng: np.random.Generator):
    yy, xx = _grid(spec.resolution)
    freq = rng.uniform(*spec.stripe_frequency)
    angle = rng.uniform(*spec.stripe_angle)
    phase = rng.uniform(0, 2 * np.pi)
    theta = np.deg2rad(angle)
    arg = 2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / spec.resolution + phase
    return 0.5 + 0.5 * np.sin(arg), int(round(freq))


def _checker(spec: ModalitySpec, rng: np.random.Generator):
    yy, xx = _grid(spec.resolution)
    cell = int(rng.integers(spec.checker_cell[0], spec.checker_cell[1] + 1))
    oy, ox = rng.integers(0, cell, size=2)
    lo, hi = sorted(rng.uniform(0.1, 0.9, size=2))
    board = ((((yy + oy) // cell) + ((xx + ox) // cell)) % 2).astype(np.float64)
    img = lo + (hi - lo) * board + rng.normal(0.0, rng.uniform(*spec.noise_scale), size=board.shape)
    return np.clip(img, 0.0, 1.0), cell


_MAKERS = {"blobs": _blobs, "stripes": _stripes, "checker-noise": _checker}


def make_modality(spec: ModalitySpec, n: int) -> ToyDataset:
    """Sample ``n`` images from the modality's generative process."""
    if n < 1:
        raise ValueError(f"make_modality: n must be >= 1, got {n}")
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, KINDS.index(spec.kind)]))
    maker = _MAKERS[spec.kind]
    images = np.empty((n, spec.channels, spec.resolution, spec.resolution), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        for c in range(spec.channels):
            img, label = maker(spec, rng)
            images[i, c] = img
            if c == 0:
                labels[i] = label
    return ToyDataset(images, labels, spec.kind)


def split(dataset: ToyDataset, ratio: float, seed: int) -> tuple[ToyDataset, ToyDataset]:
    """Disjoint, exhaustive train/held-out split; ``ratio`` is the train share."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split: ratio must be in (0, 1), got {ratio}")
    n = len(dataset)
    n_train = int(round(ratio * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split: ratio {ratio} on {n} samples leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


def with_seed(spec: ModalitySpec, seed: int) -> ModalitySpec:
    return replace(spec, seed=seed)
