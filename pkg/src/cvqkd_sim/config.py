"""Scenario configuration read from a TOML file.

Every section maps onto a dataclass; unknown keys are rejected so a typo
cannot silently fall back to a default.
"""
from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .channel import DetectorModel, TurbulenceModel
from .dsp import FrameLayout
from .errors import ConfigurationError, CvqkdError
from .rx import RxConfig
from .tx import IqImbalance

SCENARIOS = ("calibrate", "fixed_loss", "turbulence", "keyrate_sweep", "channel_model")


@dataclass(frozen=True)
class ChannelConfig:
    delta_f: float = 0.0
    linewidth: float = 0.0
    theta_s: float = 0.0
    excess_noise: float = 0.0


@dataclass(frozen=True)
class ImbalanceConfig:
    d: float = 1.0
    theta_deg: float = 0.0

    def model(self) -> IqImbalance:
        return IqImbalance(self.d, math.radians(self.theta_deg))


@dataclass(frozen=True)
class TurbulenceConfig:
    a: float = 0.125
    w: float = 0.1038
    w0: float = 0.0625
    z: float = 10500.0
    cn2: float = 1e-15
    sigma2: Optional[float] = None
    extra_loss_db: float = 14.0
    correlation_time: float = 1e-3
    trace_samples: int = 1000000

    def model(self, extra_loss_db: Optional[float] = None) -> TurbulenceModel:
        loss = self.extra_loss_db if extra_loss_db is None else extra_loss_db
        return TurbulenceModel(self.a, self.w, self.w0, self.z, self.cn2, self.sigma2, loss)


@dataclass(frozen=True)
class KeyRateConfig:
    v_a: float = 12.4
    beta: float = 0.96
    fer: float = 0.30
    block_size: Optional[float] = None
    eps_smooth: float = 1e-10
    eps_pe: float = 1e-10
    epsilon: float = 0.029
    bin_width_db: float = 1.0
    range_db: tuple = (-26.0, -14.0)
    grid_db: tuple = (-26.0, -14.0, 1.0)
    sweep_samples: int = 200000


@dataclass(frozen=True)
class OutputConfig:
    symbol_csv_frames: int = 1
    write_samples: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "fixed_loss"
    seed: int = 1
    frames: int = 1
    workers: int = 1
    output_dir: str = "out"
    losses_db: tuple = (25.0,)
    calibration: Optional[str] = None
    layout: FrameLayout = field(default_factory=FrameLayout)
    detector: DetectorModel = field(default_factory=DetectorModel)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    imbalance: ImbalanceConfig = field(default_factory=ImbalanceConfig)
    turbulence: TurbulenceConfig = field(default_factory=TurbulenceConfig)
    rx: RxConfig = field(default_factory=RxConfig)
    keyrate: KeyRateConfig = field(default_factory=KeyRateConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.frames < 1:
            raise ConfigurationError("frames must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if self.scenario == "fixed_loss" and not self.losses_db:
            raise ConfigurationError("fixed_loss needs at least one entry in losses_db")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                out[f.name] = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                out[f.name] = asdict(v)
            else:
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **kw) -> "ScenarioConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(kw)
        return ScenarioConfig(**data)


SECTIONS = {
    "layout": FrameLayout,
    "detector": DetectorModel,
    "channel": ChannelConfig,
    "imbalance": ImbalanceConfig,
    "turbulence": TurbulenceConfig,
    "rx": RxConfig,
    "keyrate": KeyRateConfig,
    "output": OutputConfig,
}
TUPLES = {"losses_db", "range_db", "grid_db"}


def _build(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    data = {k: tuple(v) if k in TUPLES else v for k, v in data.items()}
    try:
        return cls(**data)
    except CvqkdError as exc:
        raise ConfigurationError(f"[{where}] {exc}") from exc
    except TypeError as exc:
        raise ConfigurationError(f"[{where}] {exc}") from exc


def from_dict(data: dict) -> ScenarioConfig:
    top = {}
    for k, v in data.items():
        if k in SECTIONS:
            if not isinstance(v, dict):
                raise ConfigurationError(f"[{k}] must be a table")
            top[k] = _build(SECTIONS[k], v, k)
        else:
            top[k] = v
    return _build(ScenarioConfig, top, "top level")


def load(path) -> ScenarioConfig:
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {p} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config file {p}: {exc}") from exc
    return from_dict(data)
