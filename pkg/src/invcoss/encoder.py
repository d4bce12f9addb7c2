"""Masked-image-modeling ViT: patch embedding, pre-norm blocks, pixel head."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import bundle
from . import diffcore as dc
from .diffcore import NumericError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    channels: int = 1
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if min(self.channels, self.depth, self.mlp_ratio) < 1:
            raise ValueError("channels, depth and mlp_ratio must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch
        return n, n

    @property
    def tokens(self) -> int:
        r, c = self.grid
        return r * c

    def fingerprint(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return f"{bundle.fnv1a64(text.encode()):016x}"


def sincos_2d(grid: tuple[int, int], dim: int) -> torch.Tensor:
    """Fixed 2D sine-cosine table [rows*cols, dim]; half the channels encode rows, half columns."""
    if dim % 4:
        raise ValueError(f"sin-cos position table needs dim divisible by 4, got {dim}")
    q = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(q, dtype=torch.float64) / q)
    rows, cols = torch.meshgrid(torch.arange(grid[0], dtype=torch.float64),
                                torch.arange(grid[1], dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (rows.reshape(-1), cols.reshape(-1)):
        ang = coord[:, None] * omega[None, :]
        parts += [ang.sin(), ang.cos()]
    return torch.cat(parts, dim=1).to(torch.float32)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1_w = nn.Parameter(torch.ones(dim))
        self.ln1_b = nn.Parameter(torch.zeros(dim))
        self.qkv_w = nn.Parameter(torch.empty(3 * dim, dim))
        self.qkv_b = nn.Parameter(torch.zeros(3 * dim))
        self.proj_w = nn.Parameter(torch.empty(dim, dim))
        self.proj_b = nn.Parameter(torch.zeros(dim))
        self.ln2_w = nn.Parameter(torch.ones(dim))
        self.ln2_b = nn.Parameter(torch.zeros(dim))
        self.fc1_w = nn.Parameter(torch.empty(mlp_ratio * dim, dim))
        self.fc1_b = nn.Parameter(torch.zeros(mlp_ratio * dim))
        self.fc2_w = nn.Parameter(torch.empty(dim, mlp_ratio * dim))
        self.fc2_b = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        qkv = dc.linear(dc.layer_norm(x, self.ln1_w, self.ln1_b), self.qkv_w, self.qkv_b)
        q, k, v = qkv.reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        att = dc.softmax(dc.matmul(q, k.transpose(-1, -2)) / math.sqrt(d // h), axis=-1)
        out = dc.matmul(att, v).transpose(1, 2).reshape(b, n, d)
        x = x + dc.linear(out, self.proj_w, self.proj_b)
        hid = dc.gelu(dc.linear(dc.layer_norm(x, self.ln2_w, self.ln2_b), self.fc1_w, self.fc1_b))
        return x + dc.linear(hid, self.fc2_w, self.fc2_b)


class MimModel(nn.Module):
    """ViT encoder with a per-token linear pixel head.

    ``forward`` returns the reconstruction [B,c,H,W]; ``features`` returns the
    residual stream after every block, which is where statistics are tapped.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        c, p, d = config.channels, config.patch, config.dim
        self.embed_w = nn.Parameter(torch.empty(d, c * p * p))
        self.embed_b = nn.Parameter(torch.zeros(d))
        self.pos = nn.Parameter(torch.empty(1, config.tokens, d))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm_w = nn.Parameter(torch.ones(d))
        self.norm_b = nn.Parameter(torch.zeros(d))
        self.head_w = nn.Parameter(torch.empty(c * p * p, d))
        self.head_b = nn.Parameter(torch.zeros(c * p * p))
        self.reset_parameters(dc.generator(seed, "encoder"))

    def reset_parameters(self, gen: torch.Generator) -> None:
        for name, prm in self.named_parameters():
            if name == "pos":
                # learned, but started from the sin-cos table so attention is position-aware at step 0
                with torch.no_grad():
                    prm.copy_(sincos_2d(self.config.grid, self.config.dim).unsqueeze(0))
            elif name.endswith("_w") and prm.dim() == 2:
                with torch.no_grad():
                    prm.copy_(torch.randn(prm.shape, generator=gen) * 0.02)

    # -- patch plumbing -------------------------------------------------
    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError("patchify", x.shape, (-1, *expected))
        b, c, hh, ww = x.shape
        p = cfg.patch
        x = x.reshape(b, c, hh // p, p, ww // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (hh // p) * (ww // p), c * p * p)

    def unpatchify(self, t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        b = t.shape[0]
        r, cc = cfg.grid
        p, c = cfg.patch, cfg.channels
        t = t.reshape(b, r, cc, c, p, p).permute(0, 3, 1, 4, 2, 5)
        return t.reshape(b, c, r * p, cc * p)

    # -- forward ----------------------------------------------------------
    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        tok = dc.linear(self.patchify(x), self.embed_w, self.embed_b) + self.pos
        feats = []
        for blk in self.blocks:
            tok = blk(tok)
            feats.append(tok)
        return feats

    def decode(self, last: torch.Tensor) -> torch.Tensor:
        z = dc.layer_norm(last, self.norm_w, self.norm_b)
        return self.unpatchify(dc.linear(z, self.head_w, self.head_b))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.features(x)[-1])

    # -- persistence ------------------------------------------------------
    def to_records(self) -> dict:
        recs: dict = {"meta.kind": "encoder", "meta.config": json.dumps(asdict(self.config), sort_keys=True),
                      "meta.fingerprint": self.config.fingerprint()}
        for name, prm in self.state_dict().items():
            recs[f"param.{name}"] = prm.detach().to(torch.float32).numpy()
        return recs

    @classmethod
    def from_records(cls, recs: dict) -> "MimModel":
        if recs.get("meta.kind") != b"encoder":
            raise bundle.BundleError("bundle does not hold an encoder checkpoint")
        cfg = EncoderConfig(**json.loads(recs["meta.config"].decode()))
        model = cls(cfg)
        state = {k[len("param."):]: torch.from_numpy(np.array(v)) for k, v in recs.items() if k.startswith("param.")}
        model.load_state_dict(state)
        return model

    def save(self, path) -> int:
        return bundle.write(path, self.to_records())

    @classmethod
    def load(cls, path) -> "MimModel":
        return cls.from_records(bundle.read(path))


def frozen_copy(model: MimModel) -> MimModel:
    twin = copy.deepcopy(model)
    twin.eval()
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


def block_features(model: MimModel, x: torch.Tensor) -> list[torch.Tensor]:
    """Ordered per-block outputs [B, L, d]; the model has no stochastic layers."""
    return model.features(x)


# ---------------------------------------------------------------------------
# Masking and the MIM loss
# ---------------------------------------------------------------------------

@dataclass
class PatchMask:
    """Binary patch-grid mask (1 = masked). ``bits`` is [rows, cols] or [B, rows, cols]."""

    bits: torch.Tensor
    ratio: float

    @property
    def count(self) -> int:
        return int(self.bits.sum().item())

    def pixels(self, patch: int) -> torch.Tensor:
        m = self.bits.repeat_interleave(patch, dim=-2).repeat_interleave(patch, dim=-1)
        return m.unsqueeze(-3)  # channel axis


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")


def sample_mask(grid: tuple[int, int], ratio: float, gen: torch.Generator) -> PatchMask:
    """Mask exactly floor(ratio * L) patches, uniformly without replacement."""
    _check_ratio(ratio)
    rows, cols = grid
    n = rows * cols
    k = int(math.floor(ratio * n + 1e-9))
    bits = torch.zeros(n)
    if k:
        bits[torch.randperm(n, generator=gen)[:k]] = 1.0
    return PatchMask(bits.reshape(rows, cols), ratio)


def sample_masks(batch: int, grid: tuple[int, int], ratio: float, gen: torch.Generator) -> PatchMask:
    """Independent per-sample masks, [B, rows, cols]."""
    _check_ratio(ratio)
    rows, cols = grid
    n = rows * cols
    k = int(math.floor(ratio * n + 1e-9))
    order = torch.rand(batch, n, generator=gen).argsort(dim=1)
    bits = torch.zeros(batch, n)
    if k:
        bits.scatter_(1, order[:, :k], 1.0)
    return PatchMask(bits.reshape(batch, rows, cols), ratio)


def mim_forward(model: MimModel, x: torch.Tensor, mask: PatchMask, reduction: str = "mean",
                net_input: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Reconstruct ``x * (1 - M)`` and score it on masked pixels only.

    ``reduction="mean"`` divides the squared error by the number of masked
    pixels; ``"sum"`` returns the raw squared norm. ``net_input`` substitutes
    the image fed to the network (the loss target stays ``x``).
    """
    cfg = model.config
    grid = cfg.grid
    if tuple(mask.bits.shape[-2:]) != grid or mask.bits.dim() not in (2, 3):
        raise ShapeError("mim_forward", x.shape, mask.bits.shape, detail=f"mask grid must be {grid}")
    if mask.bits.dim() == 3 and mask.bits.shape[0] != x.shape[0]:
        raise ShapeError("mim_forward", x.shape, mask.bits.shape, detail="mask batch differs")
    if mask.ratio > 0 and mask.count == 0:
        raise ValueError(f"mim_forward: mask ratio {mask.ratio} selected zero of {grid[0] * grid[1]} patches")
    m = mask.pixels(cfg.patch).to(x.dtype)
    if m.dim() == 3:
        m = m.unsqueeze(0)
    m = m.expand(x.shape[0], cfg.channels, -1, -1)
    src = x if net_input is None else net_input
    recon = model(src * (1.0 - m))
    sq = ((recon - x) * m).square().sum()
    if reduction == "sum":
        return recon, sq
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    denom = m.sum()
    return recon, sq / denom if denom.item() > 0 else sq * 0.0


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1.5e-3
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.05
    mask_ratio: float = 0.75
    betas: tuple[float, float] = (0.9, 0.95)
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("schedule needs epochs >= 0, batch_size >= 1, lr > 0")
        if not 0 <= self.warmup_frac < 1 or not 0 <= self.min_lr_frac <= 1:
            raise ValueError("warmup_frac must be in [0, 1) and min_lr_frac in [0, 1]")
        _check_ratio(self.mask_ratio)


def lr_at(step: int, total: int, sched: Schedule) -> float:
    """Linear warmup then cosine decay to ``min_lr_frac * lr``."""
    warm = max(1, int(round(sched.warmup_frac * total))) if sched.warmup_frac > 0 else 0
    if step < warm:
        return sched.lr * (step + 1) / warm
    span = max(1, total - warm)
    cos = 0.5 * (1.0 + math.cos(math.pi * min(1.0, (step - warm) / span)))
    return sched.lr * (sched.min_lr_frac + (1.0 - sched.min_lr_frac) * cos)


@dataclass
class TrainTrace:
    step_loss: list[float]
    epoch_loss: list[float]
    extra: dict[str, list[float]]

    @property
    def final(self) -> float:
        return self.epoch_loss[-1] if self.epoch_loss else float("nan")


def train_loop(model: MimModel, images: np.ndarray, sched: Schedule,
               extra_loss: Callable[[int, torch.Generator], dict[str, torch.Tensor]] | None = None,
               stream: str = "pretrain") -> TrainTrace:
    """Shared optimisation loop: MIM on ``images`` plus optional extra terms.

    ``extra_loss(step, gen)`` returns named scalar terms already weighted; they
    are added to the current-batch MIM loss. All randomness comes from one
    generator derived from ``sched.seed`` and ``stream``.
    """
    sched.validate()
    n = len(images)
    if n == 0:
        raise ValueError("train_loop: empty dataset")
    data = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    gen = dc.generator(sched.seed, stream)
    steps_per_epoch = math.ceil(n / sched.batch_size)
    total = sched.epochs * steps_per_epoch
    opt = dc.Adam(model.named_parameters(), lr=sched.lr, betas=sched.betas)
    trace = TrainTrace([], [], {})
    model.train()
    step = 0
    for epoch in range(sched.epochs):
        order = torch.randperm(n, generator=gen)
        running = 0.0
        for start in range(0, n, sched.batch_size):
            x = data[order[start:start + sched.batch_size]]
            mask = sample_masks(len(x), model.config.grid, sched.mask_ratio, gen)
            _, loss = mim_forward(model, x, mask)
            total_loss = loss
            terms = extra_loss(step, gen) if extra_loss is not None else {}
            for name, term in terms.items():
                total_loss = total_loss + term
                trace.extra.setdefault(name, []).append(float(term.item()))
            value = float(total_loss.item())
            if not math.isfinite(value):
                raise NumericError("training loss is not finite", epoch=epoch, step=step)
            opt.zero_grad()
            dc.backward(total_loss)
            opt.step(lr_at(step, total, sched))
            trace.step_loss.append(float(loss.item()))
            running += float(loss.item()) * len(x)
            step += 1
        trace.epoch_loss.append(running / n)
    model.eval()
    return trace


def pretrain(model: MimModel, images: np.ndarray, sched: Schedule) -> tuple[MimModel, TrainTrace]:
    trace = train_loop(model, images, sched)
    return model, trace


@torch.no_grad()
def eval_mim(model: MimModel, images: np.ndarray, ratio: float, mask_seed: int,
             batch_size: int = 256) -> float:
    """Evaluation-mode masked MSE with masks fixed by ``mask_seed``."""
    model.eval()
    gen = dc.generator(mask_seed, "eval-mask")
    data = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    masks = sample_masks(len(data), model.config.grid, ratio, gen)
    sq, count = 0.0, 0.0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        part = PatchMask(masks.bits[sl], ratio)
        _, s = mim_forward(model, data[sl], part, reduction="sum")
        sq += float(s.item())
        count += float(part.bits.sum().item()) * model.config.patch**2 * model.config.channels
    return sq / count
