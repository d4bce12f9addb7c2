"""InvUNet: bottleneck-injected dual-stream generator.

latent z -> noise projector -> bottleneck [C_k, s, s]
    memory-cache branch: UpBlock chain, each output kept as a structural prior
    inversion branch:    UpBlock chain, each stage concatenates the prior of
                         matching resolution before its first convolution
-> 3x3 conv -> sigmoid
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import diffcore as dc
from .diffcore import ShapeError


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 128
    bottleneck: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 128)  # decoder path, last entry = bottleneck channels
    out_size: int = 32
    out_channels: int = 1
    upsample: str = "bilinear"
    norm: str = "batch"
    act: str = "leaky_relu"
    projector_norm: str = "layer"
    projector_act: str = "gelu"
    use_cache: bool = True

    @property
    def stages(self) -> int:
        return len(self.channels) - 1

    def validate(self) -> None:
        if self.stages < 1:
            raise ValueError("channels needs at least two entries (one up-stage)")
        if self.bottleneck * 2 ** self.stages != self.out_size:
            raise ValueError(
                f"out_size {self.out_size} != bottleneck {self.bottleneck} * 2^{self.stages}")
        if self.norm not in ("batch", "instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.projector_norm not in ("layer", "none"):
            raise ValueError(f"unknown projector_norm {self.projector_norm!r}")
        for a in (self.act, self.projector_act):
            if a not in _ACTS:
                raise ValueError(f"unknown activation {a!r}")
        if self.upsample not in ("bilinear", "nearest"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")


FULL_SCALE_2D = GeneratorConfig(latent_dim=128, bottleneck=14, channels=(16, 32, 64, 128, 256),
                                out_size=224, out_channels=3)

_ACTS = {"leaky_relu": dc.leaky_relu, "relu": dc.relu, "gelu": dc.gelu}


class ConvNormAct(nn.Module):
    def __init__(self, cin: int, cout: int, norm: str, act: str):
        super().__init__()
        self.w = nn.Parameter(torch.empty(cout, cin, 3, 3))
        self.b = nn.Parameter(torch.zeros(cout))
        self.norm = norm
        self.act = _ACTS[act]
        if norm != "none":
            self.gamma = nn.Parameter(torch.ones(cout))
            self.beta = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        x = dc.conv2d(x, self.w, self.b, padding=1)
        if self.norm == "batch":
            x = dc.batch_norm(x, self.gamma, self.beta)
        elif self.norm == "instance":
            x = dc.instance_norm(x, self.gamma, self.beta)
        return self.act(x)


class UpBlock(nn.Module):
    """2x upsample, optional skip concat, then two conv-norm-act layers."""

    def __init__(self, cin: int, cout: int, skip: int, cfg: GeneratorConfig):
        super().__init__()
        self.mode = cfg.upsample
        self.conv1 = ConvNormAct(cin + skip, cout, cfg.norm, cfg.act)
        self.conv2 = ConvNormAct(cout, cout, cfg.norm, cfg.act)

    def forward(self, x, skip=None):
        x = dc.upsample2x(x, self.mode)
        if skip is not None:
            x = dc.concat([x, skip], axis=1)
        return self.conv2(self.conv1(x))


class InvUNet(nn.Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig(), gen: torch.Generator | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = list(reversed(cfg.channels))  # bottleneck first
        cb, s = chans[0], cfg.bottleneck
        self.proj_w = nn.Parameter(torch.empty(cb * s * s, cfg.latent_dim))
        self.proj_b = nn.Parameter(torch.zeros(cb * s * s))
        if cfg.projector_norm == "layer":
            self.proj_gamma = nn.Parameter(torch.ones(cb * s * s))
            self.proj_beta = nn.Parameter(torch.zeros(cb * s * s))
        if cfg.use_cache:
            self.cache = nn.ModuleList(UpBlock(chans[i], chans[i + 1], 0, cfg) for i in range(cfg.stages))
        else:
            self.cache = nn.ModuleList()
        skip = (lambda i: chans[i + 1]) if cfg.use_cache else (lambda i: 0)
        self.inv = nn.ModuleList(UpBlock(chans[i], chans[i + 1], skip(i), cfg) for i in range(cfg.stages))
        self.out_w = nn.Parameter(torch.empty(cfg.out_channels, chans[-1], 3, 3))
        self.out_b = nn.Parameter(torch.zeros(cfg.out_channels))
        reinit_parameters(self, gen if gen is not None else dc.generator(0, "generator"))

    def project(self, z):
        cfg = self.cfg
        h = dc.linear(z, self.proj_w, self.proj_b)
        if cfg.projector_norm == "layer":
            h = dc.layer_norm(h, self.proj_gamma, self.proj_beta)
        h = _ACTS[cfg.projector_act](h)
        return h.reshape(z.shape[0], cfg.channels[-1], cfg.bottleneck, cfg.bottleneck)

    def forward(self, z):
        cfg = self.cfg
        if z.dim() != 2 or z.shape[1] != cfg.latent_dim:
            raise ShapeError("generate", z.shape, (-1, cfg.latent_dim), detail="latent dim mismatch")
        if cfg.norm == "batch" and z.shape[0] < 2:
            raise ShapeError("generate", z.shape, detail="batch norm generator needs B >= 2")
        h = self.project(z)
        priors = []
        c = h
        for blk in self.cache:
            c = blk(c)
            priors.append(c)
        x = h
        for i, blk in enumerate(self.inv):
            x = blk(x, priors[i] if cfg.use_cache else None)
        return dc.sigmoid(dc.conv2d(x, self.out_w, self.out_b, padding=1))


def reinit_parameters(g: nn.Module, gen: torch.Generator) -> None:
    """Fan-in-scaled uniform weights and biases; norm scales 1, shifts 0."""
    with torch.no_grad():
        for name, p in g.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("gamma", "proj_gamma"):
                p.fill_(1.0)
            elif leaf in ("beta", "proj_beta"):
                p.zero_()
            elif leaf in ("w", "proj_w", "out_w"):
                fan_in = p[0].numel()
                p.copy_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) / math.sqrt(fan_in))
        for name, p in g.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("b", "proj_b", "out_b"):
                w = dict(g.named_parameters())[name[:-1] + "w"]
                fan_in = w[0].numel()
                p.copy_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) / math.sqrt(fan_in))


def build_generator(cfg: GeneratorConfig, gen: torch.Generator) -> InvUNet:
    return InvUNet(cfg, gen)


def generate(g: InvUNet, z: torch.Tensor) -> torch.Tensor:
    return g(z)


def sample_latents(batch: int, dim: int, gen: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(batch, dim, generator=gen, dtype=dtype)


def reinit(g: InvUNet, z: torch.Tensor, gen: torch.Generator) -> tuple[InvUNet, torch.Tensor]:
    """Fresh parameters and standard-normal latents of the same shape, in place on ``g``."""
    reinit_parameters(g, gen)
    fresh = sample_latents(z.shape[0], z.shape[1], gen, z.dtype).requires_grad_(z.requires_grad)
    return g, fresh
