"""Run configuration: one INI file with a section per component.

Every field defaults to the published system setting where one exists.
Values are Python literals (``32``, ``1e-3``, ``(80, 120)``); unknown
sections or keys are rejected so typos cannot silently fall back to
defaults.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .channel import SystemConfig
from .model import ModelDims
from .nn import TrainConfig
from .scene import LidarConfig, SceneSpec

SCHEMES = ("lecln", "ls", "omp", "amp", "uni_pilot", "lidar_only", "no_afwc")
ABLATIONS = ("uni_pilot", "lidar_only", "no_afwc")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    road_extent: tuple = (8.0, 80.0, -9.0, 9.0)
    n_vehicles: int = 8
    vehicle_dims_min: tuple = (3.8, 1.7, 1.4)
    vehicle_dims_max: tuple = (5.2, 2.1, 1.9)
    buildings: bool = True
    tx_position: tuple = (0.0, 0.0, 5.0)
    rx_height: float = 1.0
    min_gap: float = 1.5

    def spec(self, seed: int) -> SceneSpec:
        kw = dict(rng_seed=int(seed), road_extent=tuple(self.road_extent), n_vehicles=self.n_vehicles,
                  vehicle_dims_range=(tuple(self.vehicle_dims_min), tuple(self.vehicle_dims_max)),
                  tx_position=tuple(self.tx_position), rx_height=self.rx_height, min_gap=self.min_gap)
        if not self.buildings:
            kw["building_boxes"] = ()
        return SceneSpec(**kw)


@dataclass(frozen=True)
class FeatureConfig:
    z_tol: float = 0.2
    dbscan_eps: float = 1.0
    min_pts: int = 8
    rho: float = 10.0
    rho_match: float = 5.0
    crop_w: int = 128
    D: int = 64
    N_w: int = 13
    K_P: int = 8
    max_paths: int = 8
    precoder_seed: int = 2024


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 8000
    n_val: int = 1000
    n_test: int = 300
    snr_min: float = -3.0
    snr_max: float = 21.0
    budgets: tuple = (8, 16, 32)


@dataclass(frozen=True)
class ExperimentGrid:
    snr_points_db: tuple = (-3.0, 0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 21.0)
    measurement_budgets: tuple = (8, 16, 32)
    realizations: int = 300
    schemes: tuple = SCHEMES
    seed: int = 99

    def __post_init__(self):
        if self.realizations < 1:
            raise ConfigError("realizations must be >= 1")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}; implemented: {SCHEMES}")


@dataclass(frozen=True)
class ModelConfig:
    F: int = 256
    pcf_ch: tuple = (16, 32)
    lcf_ch: tuple = (8, 16, 32, 32, 32)
    afwc_hidden: int = 128
    mlp_hidden: int = 1024
    ci_ch: tuple = (16, 32, 64, 32, 16)


_SECTIONS = {
    "scene": SceneConfig,
    "system": SystemConfig,
    "lidar": LidarConfig,
    "features": FeatureConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "eval": ExperimentGrid,
    "model": ModelConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    system: SystemConfig = field(default_factory=SystemConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: ExperimentGrid = field(default_factory=ExperimentGrid)
    model: ModelConfig = field(default_factory=ModelConfig)

    def dims(self, budget: int) -> ModelDims:
        m = self.model
        return ModelDims(D=self.features.D, N_P=budget, N_t=self.system.N_t, K_P=self.features.K_P,
                         N_s=self.system.N_s, crop_h=self.lidar.h, crop_w=self.features.crop_w, F=m.F,
                         pcf_ch=tuple(m.pcf_ch), lcf_ch=tuple(m.lcf_ch), afwc_hidden=m.afwc_hidden,
                         mlp_hidden=m.mlp_hidden, ci_ch=tuple(m.ci_ch))

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return out

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def overrides(self) -> list[str]:
        """``section.key`` entries that differ from the defaults."""
        mine, base = self.to_dict(), RunConfig().to_dict()
        out = ["seed"] if mine["seed"] != base["seed"] else []
        for sec in _SECTIONS:
            out += [f"{sec}.{k}" for k in mine[sec] if mine[sec][k] != base[sec][k]]
        return out

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value: str, default):
    try:
        v = ast.literal_eval(value)
    except (ValueError, SyntaxError):
        v = value
    if isinstance(default, bool):
        if isinstance(v, str):
            low = v.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ConfigError(f"expected a boolean, got {value!r}")
            return low in ("true", "yes", "1")
        return bool(v)
    if isinstance(default, tuple):
        if isinstance(v, (int, float)):
            v = (v,)
        if not isinstance(v, (list, tuple)):
            raise ConfigError(f"expected a tuple, got {value!r}")
        return tuple(v)
    if isinstance(default, float) and isinstance(v, int):
        return float(v)
    if isinstance(default, (int, float)) and not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}")
    return v


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from e
    base = RunConfig()
    kw = {}
    if cp.has_section("run"):
        for key, value in cp.items("run"):
            if key != "seed":
                raise ConfigError(f"unknown key [run] {key}")
            kw["seed"] = int(_coerce(value, 0))
    for sec in cp.sections():
        if sec == "run":
            continue
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        current = getattr(base, sec)
        names = {f.name for f in fields(current)}
        upd = {}
        for key, value in cp.items(sec):
            if key not in names:
                raise ConfigError(f"unknown key [{sec}] {key}")
            try:
                upd[key] = _coerce(value, getattr(current, key))
            except ConfigError as e:
                raise ConfigError(f"[{sec}] {key}: {e}") from None
        try:
            kw[sec] = dataclasses.replace(current, **upd)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{sec}]: {e}") from e
    return RunConfig(**kw)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    lines = ["[run]", f"seed = {d['seed']}", ""]
    for sec in _SECTIONS:
        lines.append(f"[{sec}]")
        for k, v in d[sec].items():
            lines.append(f"{k} = {tuple(v) if isinstance(v, list) else v!r}")
        lines.append("")
    return "\n".join(lines)
