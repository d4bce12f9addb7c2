"""Run configuration: YAML sections mapped onto frozen dataclasses, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import ModalitySpec
from .encoder import EncoderConfig
from .invunet import GeneratorConfig


class ConfigError(ValueError):
    pass


REGIMES = ("invcoss", "seqssl", "joint")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 2e-3
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.05
    mask_ratio: float = 0.75
    betas: tuple[float, float] = (0.9, 0.95)


@dataclass(frozen=True)
class ContinualConfig:
    regime: str = "invcoss"
    buffer_ratio: float = 0.05
    lambda_replay: float = 1.0
    lambda_kd: float = 0.1
    invert_with: str = "own"  # "own": task t's checkpoint; "latest": f_{T-1}
    purge_raw: bool = False


@dataclass(frozen=True)
class InversionSection:
    alpha_norm: float = 1.0
    alpha_img: float = 0.1
    alpha_rep: float = 0.1
    steps: int = 300
    batch_size: int = 32
    n_samples: int = 100  # used by `invert`; continual runs derive it from the buffer ratio
    lr_generator: float = 2e-4
    lr_latent: float = 0.05
    reinit_every: int = 1
    mask_ratio: float = 0.75
    ablate: tuple[str, ...] = ()
    preview_cap: int = 16
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)


@dataclass(frozen=True)
class TaskConfig:
    id: str = "blobs"
    kind: str = "blobs"
    size: int = 2000
    held_out: int = 200
    seed: int = 0
    blob_count: tuple[int, int] = ModalitySpec.blob_count
    blob_width: tuple[float, float] = ModalitySpec.blob_width
    stripe_frequency: tuple[float, float] = ModalitySpec.stripe_frequency
    stripe_angle: tuple[float, float] = ModalitySpec.stripe_angle
    checker_cell: tuple[int, int] = ModalitySpec.checker_cell
    noise_scale: tuple[float, float] = ModalitySpec.noise_scale

    def modality(self, encoder: EncoderConfig) -> ModalitySpec:
        return ModalitySpec(kind=self.kind, resolution=encoder.image_size, channels=encoder.channels,
                            blob_count=self.blob_count, blob_width=self.blob_width,
                            stripe_frequency=self.stripe_frequency, stripe_angle=self.stripe_angle,
                            checker_cell=self.checker_cell, noise_scale=self.noise_scale, seed=self.seed)


@dataclass(frozen=True)
class EvalConfig:
    mask_seed: int = 1234
    mask_ratio: float = 0.75
    stats_batch_size: int = 64


def _default_tasks() -> tuple[TaskConfig, ...]:
    return (TaskConfig("blobs", "blobs"), TaskConfig("stripes", "stripes"),
            TaskConfig("checker-noise", "checker-noise"))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    continual: ContinualConfig = field(default_factory=ContinualConfig)
    inversion: InversionSection = field(default_factory=InversionSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    tasks: tuple[TaskConfig, ...] = field(default_factory=_default_tasks)

    def validate(self) -> None:
        from .encoder import Schedule
        from .inversion import InversionConfig

        try:
            self.encoder.validate()
            Schedule(**dataclasses.asdict(self.train)).validate()
            InversionConfig(**_inversion_kwargs(self.inversion)).validate()
            for t in self.tasks:
                t.modality(self.encoder).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        c = self.continual
        if c.regime not in REGIMES:
            raise ConfigError(f"continual.regime must be one of {REGIMES}, got {c.regime!r}")
        if not 0.0 <= c.buffer_ratio <= 1.0:
            raise ConfigError(f"continual.buffer_ratio must be in [0, 1], got {c.buffer_ratio}")
        if c.lambda_kd < 0 or c.lambda_replay < 0:
            raise ConfigError("continual lambdas must be >= 0")
        if c.invert_with not in ("own", "latest"):
            raise ConfigError(f"continual.invert_with must be 'own' or 'latest', got {c.invert_with!r}")
        if not self.tasks:
            raise ConfigError("at least one task is required")
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"task ids must be unique: {ids}")
        for t in self.tasks:
            if t.size < 1 or t.held_out < 1:
                raise ConfigError(f"task {t.id}: size and held_out must be >= 1")
        g = self.inversion.generator
        if g.out_size != self.encoder.image_size or g.out_channels != self.encoder.channels:
            raise ConfigError("inversion.generator output must match encoder image_size/channels")
        if self.inversion.preview_cap < 0:
            raise ConfigError("inversion.preview_cap must be >= 0")
        if not 0.0 <= self.eval.mask_ratio <= 1.0 or self.eval.stats_batch_size < 1:
            raise ConfigError("eval.mask_ratio must be in [0, 1] and stats_batch_size >= 1")


def _inversion_kwargs(sec: InversionSection) -> dict:
    kw = dataclasses.asdict(sec)
    kw.pop("preview_cap")
    kw["generator"] = sec.generator
    kw["ablate"] = frozenset(sec.ablate)
    return kw


# ---------------------------------------------------------------------------
# dict <-> dataclass
# ---------------------------------------------------------------------------

def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin in (typing.Union, types.UnionType):
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, where: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list, frozenset)):
        return [to_dict(v) for v in obj]
    return obj


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
