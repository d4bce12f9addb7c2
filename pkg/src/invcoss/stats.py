"""Per-block feature statistics: batch-wise Welford pooling, capture and matching."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from . import bundle
from .diffcore import ShapeError
from .encoder import MimModel, block_features


@dataclass(frozen=True)
class LayerStatistics:
    """Running mean/variance matrices [L, d] (population variance) over ``count`` samples."""

    block: int
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    count: int = 0

    @classmethod
    def empty(cls, block: int = 0) -> "LayerStatistics":
        return cls(block)


def welford_merge(state: LayerStatistics, batch_feats) -> LayerStatistics:
    """Fold one batch [n, L, d] into ``state`` with the pooled mean/variance update.

    Arithmetic runs in the batch's dtype (float32 or float64).
    """
    x = np.asarray(batch_feats.detach().cpu().numpy() if torch.is_tensor(batch_feats) else batch_feats)
    if x.ndim != 3:
        raise ShapeError("welford_merge", x.shape, detail="expected [n, L, d]")
    n = x.shape[0]
    if n == 0:
        raise ValueError("welford_merge: empty batch")
    mu_b = x.mean(axis=0)
    var_b = ((x - mu_b) ** 2).mean(axis=0)
    if state.count == 0:
        return replace(state, mean=mu_b, var=var_b, count=n)
    if state.mean.shape != mu_b.shape:
        raise ShapeError("welford_merge", state.mean.shape, x.shape[1:])
    dt = x.dtype
    n_prev = state.count
    n_tot = n_prev + n
    mu_prev = state.mean.astype(dt, copy=False)
    var_prev = state.var.astype(dt, copy=False)
    delta = mu_prev - mu_b
    mean = (dt.type(n_prev) * mu_prev + dt.type(n) * mu_b) / dt.type(n_tot)
    var = ((dt.type(n_prev) * var_prev + dt.type(n) * var_b) / dt.type(n_tot)
           + dt.type(n_prev * n / n_tot**2) * delta**2)
    return replace(state, mean=mean, var=var, count=n_tot)


@dataclass
class StatsArchive:
    layers: list[LayerStatistics]
    fingerprint: str
    task: str = ""

    @property
    def count(self) -> int:
        return self.layers[0].count if self.layers else 0

    def to_records(self) -> dict:
        recs: dict = {"meta.kind": "stats", "meta.fingerprint": self.fingerprint, "meta.task": self.task}
        for st in self.layers:
            recs[f"block{st.block}.mean"] = st.mean.astype(np.float32)
            recs[f"block{st.block}.var"] = st.var.astype(np.float32)
        recs["count"] = np.array(self.count, dtype=np.float32)
        return recs

    @classmethod
    def from_records(cls, recs: dict) -> "StatsArchive":
        if recs.get("meta.kind") != b"stats":
            raise bundle.BundleError("bundle does not hold a stats archive")
        count = int(recs["count"])
        layers = []
        i = 0
        while f"block{i}.mean" in recs:
            layers.append(LayerStatistics(i, recs[f"block{i}.mean"], recs[f"block{i}.var"], count))
            i += 1
        return cls(layers, recs["meta.fingerprint"].decode(), recs["meta.task"].decode())

    def save(self, path) -> int:
        return bundle.write(path, self.to_records())

    @classmethod
    def load(cls, path) -> "StatsArchive":
        return cls.from_records(bundle.read(path))


class FingerprintMismatch(ValueError):
    pass


def check_fingerprint(archive: StatsArchive, model: MimModel) -> None:
    fp = model.config.fingerprint()
    if archive.fingerprint != fp:
        raise FingerprintMismatch(f"stats fingerprint {archive.fingerprint} does not match model {fp}")
    if len(archive.layers) != model.config.depth:
        raise FingerprintMismatch(f"archive has {len(archive.layers)} blocks, model depth {model.config.depth}")


@torch.no_grad()
def capture_stats(model: MimModel, images: np.ndarray, batch_size: int = 64, task: str = "",
                  dtype: torch.dtype = torch.float64) -> StatsArchive:
    """One evaluation-mode pass in index order, Welford-merged per block.

    The forward runs in float32; merging happens in ``dtype``.
    """
    if len(images) == 0:
        raise ValueError("capture_stats: empty dataset")
    model.eval()
    layers = [LayerStatistics.empty(i) for i in range(model.config.depth)]
    data = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    for start in range(0, len(data), batch_size):
        feats = block_features(model, data[start:start + batch_size])
        layers = [welford_merge(st, f.to(dtype)) for st, f in zip(layers, feats)]
    return StatsArchive(layers, model.config.fingerprint(), task)


def norm_loss(batch_feats: list[torch.Tensor], archive: StatsArchive) -> torch.Tensor:
    """Sum over blocks of L2 distances between batch mean/variance and the archive's."""
    if len(batch_feats) != len(archive.layers):
        raise ShapeError("norm_loss", (len(batch_feats),), (len(archive.layers),), detail="block count")
    total = None
    for f, st in zip(batch_feats, archive.layers):
        if tuple(f.shape[1:]) != tuple(st.mean.shape):
            raise ShapeError("norm_loss", f.shape, st.mean.shape)
        mu = f.mean(dim=0)
        var = (f - mu).square().mean(dim=0)
        ref_mu = torch.as_tensor(st.mean, dtype=f.dtype)
        ref_var = torch.as_tensor(st.var, dtype=f.dtype)
        term = _l2(mu - ref_mu) + _l2(var - ref_var)
        total = term if total is None else total + term
    return total


def _l2(t: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite slope at 0; route exact zeros through a zero gradient
    sq = t.square().sum()
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))
