"""Run configuration: typed sections, flat ``section.key=value`` files, overrides.

A config file holds one ``key=value`` pair per line; blank lines and lines
starting with ``#`` are ignored. Keys are ``<section>.<field>`` with the
sections ``data``, ``model``, ``optim``, ``train``, ``eval`` and ``slice``.
Tuples are comma-separated, optional values accept ``none``, booleans accept
``true``/``false``. Unknown keys and unparsable values raise
:class:`ConfigError`.
"""

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: Optional[str] = None  # SNNFEAT file; synthetic data when unset
    normalize: bool = False
    num_classes: int = 5
    per_class: int = 200
    frames: int = 100
    features: int = 20
    noise_std: float = 0.5
    amplitude: float = 0.2
    offset: float = 0.05
    seed: int = 0


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (128, 128)
    alpha: tuple[float, ...] = (0.9, 0.9)
    v_th: float = 1.0
    dropout_p: Optional[float] = None  # trainer default: 0.1 for adam, 0 for ivon
    boxcar_halfwidth: float = 0.5
    boxcar_gain: float = 0.5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


@dataclass
class OptimConfig:
    trainer: str = "adam"
    lr: Optional[float] = None  # 1e-3 for adam, 0.1 for ivon
    beta1: float = 0.9
    beta2: Optional[float] = None  # 0.999 for adam, 0.99999 for ivon
    eps: float = 1e-8
    wd: float = 1e-5
    h0: float = 1.0
    ess: Optional[float] = None  # training-set size when unset
    train_samples: int = 1
    clip_norm: float = 0.0
    bn_calibrate: bool = True


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    out_dir: str = "run"
    sched_factor: float = 0.5
    sched_patience: int = 3
    sched_min_lr: float = 1e-5
    val_mc_samples: int = 0  # 0 validates IVON at the posterior mean


@dataclass
class EvalConfig:
    mc_samples: int = 20
    num_bins: int = 15
    split: str = "test"
    seed: int = 0


@dataclass
class SliceConfig:
    direction_seed: int = 0
    alpha_min: float = -1.0
    alpha_max: float = 1.0
    num_points: int = 201
    batch_ids: tuple[int, ...] = (0, 1, 2, 3)
    batch_size: int = 32
    batch_seed: int = 0
    mc_samples: int = 20
    noise: str = "common"
    n_jobs: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    slice: SliceConfig = field(default_factory=SliceConfig)

    def to_dict(self) -> dict:
        out = {}
        for sec in dataclasses.fields(self):
            for f in dataclasses.fields(getattr(self, sec.name)):
                value = getattr(getattr(self, sec.name), f.name)
                out[f"{sec.name}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, flat: dict) -> "RunConfig":
        cfg = cls()
        for key, value in flat.items():
            cfg.set(key, value)
        return cfg

    def set(self, key: str, value) -> None:
        """Assign ``section.field``; string values are parsed to the field type."""
        section, _, name = key.partition(".")
        sec = getattr(self, section, None) if section in _SECTIONS else None
        if sec is None or name not in _field_types(type(sec)):
            raise ConfigError(f"unknown config key {key!r}")
        kind = _field_types(type(sec))[name]
        try:
            parsed = _parse(value, kind) if isinstance(value, str) else _coerce(value, kind)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value {value!r} for {key}") from None
        setattr(sec, name, parsed)

    def validate(self) -> "RunConfig":
        if self.optim.trainer not in ("adam", "ivon"):
            raise ConfigError(f"optim.trainer must be 'adam' or 'ivon', got {self.optim.trainer!r}")
        if len(self.model.alpha) != len(self.model.hidden):
            raise ConfigError("model.alpha needs one entry per hidden layer")
        if self.train.epochs < 0 or self.train.batch_size < 1:
            raise ConfigError("need train.epochs >= 0 and train.batch_size >= 1")
        if self.optim.train_samples < 1 or self.eval.mc_samples < 1:
            raise ConfigError("sample counts must be at least 1")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError(f"eval.split must be train, val or test, got {self.eval.split!r}")
        if not 0 < self.train.sched_factor <= 1 or self.train.sched_patience < 0:
            raise ConfigError("need 0 < train.sched_factor <= 1 and train.sched_patience >= 0")
        return self

    # trainer-dependent defaults

    def resolved_dropout(self) -> float:
        if self.model.dropout_p is not None:
            return self.model.dropout_p
        return 0.1 if self.optim.trainer == "adam" else 0.0

    def resolved_lr(self) -> float:
        if self.optim.lr is not None:
            return self.optim.lr
        return 1e-3 if self.optim.trainer == "adam" else 0.1

    def resolved_beta2(self) -> float:
        if self.optim.beta2 is not None:
            return self.optim.beta2
        return 0.999 if self.optim.trainer == "adam" else 0.99999


_SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse(text: str, kind):
    text = text.strip()
    if typing.get_origin(kind) is typing.Union:
        if text.lower() in ("none", ""):
            return None
        kind = next(a for a in typing.get_args(kind) if a is not type(None))
    if typing.get_origin(kind) is tuple:
        item = typing.get_args(kind)[0]
        return tuple(_parse(t, item) for t in text.split(",") if t.strip())
    if kind is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(text)
    return kind(text)


def _coerce(value, kind):
    # values from a JSON config echo
    if typing.get_origin(kind) is typing.Union:
        if value is None:
            return None
        kind = next(a for a in typing.get_args(kind) if a is not type(None))
    if typing.get_origin(kind) is tuple:
        item = typing.get_args(kind)[0]
        return tuple(_coerce(v, item) for v in value)
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise TypeError(value)
    return value


def parse_lines(lines, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}: line {lineno}: expected key=value")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides=(), base: RunConfig | None = None) -> RunConfig:
    """Build a config from defaults (or ``base``), an optional file, then overrides."""
    cfg = base if base is not None else RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for key, value in parse_lines(text.splitlines(), str(path)):
            cfg.set(key, value)
    for key, value in parse_lines(overrides, "--set"):
        cfg.set(key, value)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    """Render a config in the file format; ``load_config`` reads it back unchanged."""
    lines = []
    for key, value in cfg.to_dict().items():
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = str(value).lower()
        elif isinstance(value, list):
            text = ",".join(repr(v) for v in value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"
