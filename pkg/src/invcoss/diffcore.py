"""Differentiable substrate: shape-checked tensor ops, guarded backward, Adam, grad checks.

Values live in ``torch.Tensor`` objects; torch's autograd supplies the dynamic
tape. Everything here adds the contracts the rest of the package relies on:
structured shape errors, single-use backward roots, an explicit Adam state that
refuses non-finite gradients, and a central finite-difference checker that never
touches autograd.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    """Operand shapes do not conform for ``op``."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(list(s)) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class BackwardError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    """Non-finite value encountered; ``context`` carries where it happened."""

    def __init__(self, message: str, **context):
        self.context = context
        if context:
            message += " [" + ", ".join(f"{k}={v}" for k, v in context.items()) + "]"
        super().__init__(message)


# ---------------------------------------------------------------------------
# Reference-mode runtime
# ---------------------------------------------------------------------------

def configure_threads(n: int | None = None) -> int:
    """Pin torch's intra-op pool. Defaults to ``INVCOSS_THREADS`` (or 1)."""
    if n is None:
        n = int(os.environ.get("INVCOSS_THREADS", "1"))
    n = max(1, int(n))
    if torch.get_num_threads() != n:
        torch.set_num_threads(n)
    return n


def derive_seed(*parts: int | str) -> int:
    """Stable 63-bit seed from a tuple of ints/strings."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode("utf-8"))
        else:
            words.append(int(p) & 0xFFFFFFFF)
            words.append((int(p) >> 32) & 0xFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def generator(*seed_parts: int | str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*seed_parts))
    return g


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def _need_ndim(op: str, x: torch.Tensor, ndim: int) -> None:
    if x.dim() != ndim:
        raise ShapeError(op, x.shape, detail=f"expected {ndim} dims")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != (b.shape[-2] if b.dim() > 1 else b.shape[0]):
        raise ShapeError("matmul", a.shape, b.shape)
    if a.dim() > 2 and b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims differ")
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    return F.linear(x, weight, bias)


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           padding: int = 0) -> torch.Tensor:
    """Stride-1 2D convolution, ``x`` [B,C,H,W], ``weight`` [O,C,k,k]."""
    _need_ndim("conv2d", x, 4)
    if weight.dim() != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    k = weight.shape[-1]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    # channels-last halves the oneDNN backward cost on CPU
    cl = torch.channels_last
    return F.conv2d(x.contiguous(memory_format=cl), weight.contiguous(memory_format=cl), bias,
                    stride=1, padding=padding)


def upsample2x(x: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    _need_ndim("upsample2x", x, 4)
    if mode == "nearest":
        return F.interpolate(x, scale_factor=2, mode="nearest")
    if mode == "bilinear":
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    raise ValueError(f"upsample2x: unknown mode {mode!r}")


def layer_norm(x: torch.Tensor, weight: torch.Tensor | None, bias: torch.Tensor | None,
               eps: float = 1e-5) -> torch.Tensor:
    d = x.shape[-1]
    if weight is not None and tuple(weight.shape) != (d,):
        raise ShapeError("layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, (d,), weight, bias, eps)


def batch_norm(x: torch.Tensor, weight: torch.Tensor | None, bias: torch.Tensor | None,
               eps: float = 1e-5) -> torch.Tensor:
    """Training-mode batch norm over every axis but 1 (batch statistics only)."""
    if x.dim() < 2:
        raise ShapeError("batch_norm", x.shape, detail="need [B,C,...]")
    if x.shape[0] < 2:
        raise ShapeError("batch_norm", x.shape, detail="batch statistics need B >= 2")
    if weight is not None and tuple(weight.shape) != (x.shape[1],):
        raise ShapeError("batch_norm", x.shape, weight.shape)
    return F.batch_norm(x, None, None, weight, bias, training=True, eps=eps)


def instance_norm(x: torch.Tensor, weight: torch.Tensor | None, bias: torch.Tensor | None,
                  eps: float = 1e-5) -> torch.Tensor:
    _need_ndim("instance_norm", x, 4)
    return F.instance_norm(x, weight=weight, bias=bias, eps=eps)


def gelu(x):
    return F.gelu(x)


def relu(x):
    return F.relu(x)


def leaky_relu(x, slope: float = 0.2):
    return F.leaky_relu(x, slope)


def sigmoid(x):
    return torch.sigmoid(x)


def tanh(x):
    return torch.tanh(x)


def softmax(x, axis: int = -1):
    return torch.softmax(x, dim=axis)


def _same_shape(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if torch.is_tensor(b) and b.dim() > 0 and a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a, b):
    _same_shape("add", a, b)
    return a + b


def sub(a, b):
    _same_shape("sub", a, b)
    return a - b


def mul(a, b):
    _same_shape("mul", a, b)
    return a * b


class _Abs(torch.autograd.Function):
    """|x| with subgradient exactly 0 at 0."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.abs()

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * torch.sign(x)


def abs(x):  # noqa: A001 - mirrors the op name
    return _Abs.apply(x)


def square(x):
    return x * x


def reduce_sum(x, axis=None):
    return x.sum() if axis is None else x.sum(dim=axis)


def reduce_mean(x, axis=None):
    return x.mean() if axis is None else x.mean(dim=axis)


def reshape(x, shape: Sequence[int]):
    n = int(np.prod([s for s in shape if s != -1])) if shape else 1
    if -1 not in shape and n != x.numel():
        raise ShapeError("reshape", x.shape, shape)
    return x.reshape(*shape)


def transpose(x, a: int, b: int):
    return x.transpose(a, b)


def concat(xs: Sequence[torch.Tensor], axis: int = 0):
    ref = xs[0]
    for x in xs[1:]:
        if x.dim() != ref.dim() or any(
            x.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != axis % ref.dim()
        ):
            raise ShapeError("concat", ref.shape, x.shape)
    return torch.cat(list(xs), dim=axis)


def masked_select(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if x.shape != mask.shape:
        raise ShapeError("masked_select", x.shape, mask.shape)
    return torch.masked_select(x, mask.bool())


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def backward(root: torch.Tensor, leaves: Iterable[torch.Tensor] = ()) -> None:
    """Reverse pass from a scalar root; each root may be consumed once.

    Leaves listed in ``leaves`` that the root cannot reach get an explicit zero
    gradient so callers never see ``None``.
    """
    if root.numel() != 1:
        raise BackwardError(f"backward: root must be scalar, got shape {list(root.shape)}")
    if getattr(root, "_invcoss_consumed", False):
        raise BackwardError("backward: root already consumed; rebuild the forward pass first")
    root._invcoss_consumed = True
    if root.requires_grad:
        root.backward()
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = torch.zeros_like(leaf)


def zero_grads(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None],
              state: AdamState, lr: float | None = None) -> None:
    """Bias-corrected Adam update, applied in place. Parameters whose grad is None are skipped."""
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NumericError("adam_step: non-finite gradient", parameter=name, step=state.t + 1)
    state.t += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError("adam_step", p.shape, g.shape, detail=name)
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


class Adam:
    """Named-parameter Adam driver reading ``.grad`` from each parameter."""

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.state = AdamState(lr=lr, betas=tuple(betas), eps=eps)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state, lr)


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

def _scalar(out) -> float:
    if not torch.is_tensor(out) or out.numel() != 1:
        shape = list(out.shape) if torch.is_tensor(out) else type(out).__name__
        raise ValueError(f"grad_check: function must return a scalar, got {shape}")
    return float(out.item())


def grad_check(fn: Callable[..., torch.Tensor], point, eps: float = 1e-6,
               dtype: torch.dtype = torch.float64, skip: Callable[[tuple, np.ndarray], np.ndarray] | None = None
               ) -> float:
    """Max relative error between autograd and central differences.

    ``point`` is a tensor/array or a sequence of them; ``fn`` receives the same
    number of tensors. ``skip(index, values)`` may return a boolean mask of
    coordinates to exclude (e.g. near abs kinks).
    """
    single = torch.is_tensor(point) or isinstance(point, np.ndarray)
    pts = [point] if single else list(point)
    base = [torch.as_tensor(np.asarray(p.detach().cpu() if torch.is_tensor(p) else p), dtype=dtype).clone()
            for p in pts]

    leaves = [b.clone().requires_grad_(True) for b in base]
    out = fn(*leaves)
    _scalar(out)
    analytic = torch.autograd.grad(out, leaves, allow_unused=True) if out.requires_grad else [None] * len(leaves)
    analytic = [np.zeros(b.shape) if a is None else a.detach().double().numpy() for a, b in zip(analytic, base)]

    worst = 0.0
    with torch.no_grad():
        for k, b in enumerate(base):
            flat = b.reshape(-1)
            fd = np.zeros(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                args = [x.clone() for x in base]
                args[k].reshape(-1)[i] = orig + eps
                hi = _scalar(fn(*args))
                args[k].reshape(-1)[i] = orig - eps
                lo = _scalar(fn(*args))
                fd[i] = (hi - lo) / (2.0 * eps)
            a = analytic[k].reshape(-1)
            err = np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-12)
            if skip is not None:
                keep = ~np.asarray(skip(k, b.numpy().reshape(-1)), dtype=bool)
                err = err[keep]
            if err.size:
                worst = max(worst, float(err.max()))
    return worst
