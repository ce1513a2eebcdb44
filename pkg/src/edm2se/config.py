"""Run configuration: one JSON document with one section per component."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .mpnet.net import NetConfig
from .precond import SignalStats, SkipMode
from .schedule import BridgeSchedule
from .signal import StftConfig

SEED_ENV = "EDM2SE_SEED"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 50
    t_eps: float = 0.02

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0 < self.t_eps < 1:
            raise ValueError(f"t_eps must lie in (0, 1), got {self.t_eps}")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2.5e-3
    lr_ref_samples: float = 3e4
    batch_size: int = 8
    alpha: float = 0.001
    skip_mode: str = "noise"
    seed: int = 0
    snapshot_every: int = 256
    total_steps: int = 4096
    ema_gammas: tuple = (16.97, 6.94)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "ema_gammas", tuple(float(g) for g in self.ema_gammas))
        SkipMode.parse(self.skip_mode)
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not self.lr_ref_samples > 0:
            raise ValueError("lr_ref_samples must be > 0")
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")

    @property
    def mode(self) -> SkipMode:
        return SkipMode.parse(self.skip_mode)


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 512
    item_samples: int = 4000
    segment_frames: int = 16
    snr_low: float = 0.0
    snr_high: float = 10.0
    seed: int = 1234
    n_valid: int = 4
    valid_samples: int = 2000
    valid_snr: float = 5.0

    def __post_init__(self):
        if self.n_train < 1 or self.n_valid < 1:
            raise ValueError("n_train and n_valid must be >= 1")
        if self.segment_frames < 2:
            raise ValueError("segment_frames must be >= 2")
        if self.snr_high < self.snr_low:
            raise ValueError("snr_high must be >= snr_low")


@dataclass(frozen=True)
class RunConfig:
    schedule: BridgeSchedule = field(default_factory=BridgeSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    stats: SignalStats | None = None
    net: NetConfig = field(default_factory=NetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            out[f.name] = None if val is None else _plain(dataclasses.asdict(val))
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(key, "unknown section")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            if name not in doc:
                continue
            if doc[name] is None:
                if name != "stats":
                    raise ConfigError(name, "section may not be null")
                kwargs[name] = None
                continue
            kwargs[name] = _build_section(name, section_cls, doc[name])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def with_env_seed(self, environ=os.environ) -> "RunConfig":
        raw = environ.get(SEED_ENV)
        if raw is None:
            return self
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"${SEED_ENV}", f"not an integer: {raw!r}") from None
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))

    @property
    def mode(self) -> SkipMode:
        return self.train.mode

    @property
    def sampler_cfg(self) -> SamplerConfig:
        """Sampler settings with t_eps taken from the schedule."""
        return dataclasses.replace(self.sampler, t_eps=self.schedule.t_eps)


_SECTIONS = {
    "schedule": BridgeSchedule,
    "sampler": SamplerConfig,
    "stft": StftConfig,
    "stats": SignalStats,
    "net": NetConfig,
    "data": DataConfig,
    "train": TrainConfig,
}


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build_section(name, section_cls, values):
    if not isinstance(values, dict):
        raise ConfigError(name, "section must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(section_cls)}
    for key in values:
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
    for key, val in values.items():
        default = fields[key].default
        if isinstance(default, bool) or default is dataclasses.MISSING:
            continue
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{name}.{key}", f"expected a number, got {val!r}")
            if isinstance(default, int) and not isinstance(default, bool) and isinstance(val, float) and not val.is_integer():
                raise ConfigError(f"{name}.{key}", f"expected an integer, got {val!r}")
        if isinstance(default, str) and not isinstance(val, str):
            raise ConfigError(f"{name}.{key}", f"expected a string, got {val!r}")
        if isinstance(default, tuple) and not isinstance(val, list):
            raise ConfigError(f"{name}.{key}", f"expected a list, got {val!r}")
    coerced = {}
    for key, val in values.items():
        default = fields[key].default
        if isinstance(default, int) and not isinstance(default, bool):
            val = int(val)
        elif isinstance(default, float):
            val = float(val)
        coerced[key] = val
    try:
        return section_cls(**coerced)
    except (ValueError, TypeError) as exc:
        bad = _guess_field(str(exc), values) or name
        raise ConfigError(bad if "." in bad else f"{name}.{bad}" if bad != name else name, str(exc)) from exc


def _guess_field(message: str, values: dict) -> str | None:
    for key in sorted(values, key=len, reverse=True):
        if key in message:
            return key
    return None
