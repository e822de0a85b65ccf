"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .io import dumps
from .optimizer import SolverConfig
from .simworld import CameraConfig, DriveConfig, SensorNoiseConfig, WorldConfig


@dataclass
class MatchingConfig:
    delta: float = 15.0
    xi: float = 40.0
    reinit_threshold: float = 2.0
    # "deviation": best-agreeing survivor of both gates; "distance": nearest survivor
    selection: str = "deviation"
    grid_cell: float = 15.0

    def __post_init__(self):
        if self.selection not in ("distance", "deviation"):
            raise ValueError(f"selection must be 'distance' or 'deviation', got {self.selection!r}")
        if not (self.delta > 0 and self.xi >= 0 and self.reinit_threshold > 0 and self.grid_cell > 0):
            raise ValueError("matching thresholds must be positive")


@dataclass
class LocalizeConfig:
    window: int = 20
    solve_every: int = 10
    # windows are re-solved as they slide, so a few LM steps per solve suffice
    max_iterations: int = 5
    rolling_shutter: bool = True
    pixel_sigma: float = 1.5
    pixel_huber: float = 2.0
    # road axes: lateral, longitudinal, altitudinal
    anchor_sigma: tuple = (0.1, 0.3, 0.1)
    anchor_huber: float = 0.0  # <= 0 disables the kernel on anchors
    min_baseline_m: float = 1.0
    border_margin_px: float = 5.0
    use_track_ids: bool = True
    track_iou: float = 0.3
    track_max_gap: int = 2
    # without detector ids, tracks seen in fewer frames are not reported
    min_track_frames: int = 4
    geo_n_frames: int = 8
    geo_max_frames: int = 128
    geo_min_spread: float = 0.05
    polyline_step_m: float = 1.0
    # frames within which a second agreeing match must confirm a reinitialization (0 jumps at once)
    reinit_confirm_frames: int = 1
    # keep roll and pitch from the inertial attitude after each window solve
    gravity_from_ins: bool = True
    # anchors spread at least this far along the track let the oldest window keyframe float
    float_min_spread_m: float = 20.0

    def __post_init__(self):
        self.anchor_sigma = tuple(float(v) for v in self.anchor_sigma)
        if len(self.anchor_sigma) != 3 or min(self.anchor_sigma) <= 0:
            raise ValueError("anchor_sigma needs three positive values")
        if self.window < 2 or self.solve_every < 1:
            raise ValueError("window must be >= 2 and solve_every >= 1")
        if self.geo_n_frames < 3:
            raise ValueError("geo_n_frames must be >= 3")


@dataclass
class EvaluationConfig:
    match_radius_m: dict = field(default_factory=lambda: {
        "Sign": 2.0, "Arrow": 2.0, "LaneBoundary": 1.0, "RoadsideBarrier": 1.0})
    pair_radius_m: float = 50.0
    polyline_cap_m: float = 3.0
    detection_range_m: float = 60.0


def _mapping_default() -> DriveConfig:
    return DriveConfig(
        speed_mps=25.0, frame_rate_hz=30.0, stream="mapping",
        noise=SensorNoiseConfig(ins_bias_rw_sigma=0.003, ins_heading_rw_sigma=0.0001, pixel_sigma=1.0,
                                detection_dropout=0.05),
    )


def _drive_default() -> DriveConfig:
    return DriveConfig(
        speed_mps=22.0, frame_rate_hz=10.0, stream="drive",
        noise=SensorNoiseConfig(gnss_outage_windows=[(30.0, 33.0)]),
    )


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    mapping: DriveConfig = field(default_factory=_mapping_default)
    drive: DriveConfig = field(default_factory=_drive_default)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    optimizer: SolverConfig = field(default_factory=SolverConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    # deliberate geo-label offset of the map, road frame (lateral, longitudinal, altitudinal)
    map_bias: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.map_bias = tuple(float(v) for v in self.map_bias)
        if len(self.map_bias) != 3:
            raise ValueError("map_bias needs three values")

    def with_seed(self, seed: int) -> RunConfig:
        cfg = dataclasses.replace(self, seed=int(seed))
        return cfg

    def to_dict(self) -> dict:
        return _to_plain(self)

    def digest(self) -> str:
        return hashlib.sha256(dumps(self.to_dict()).encode()).hexdigest()


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    return obj


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key '{where + unknown[0]}'")
    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        if isinstance(hint, type) and dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}{name}.")
            continue
        default = _default_of(cls, name)
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"config key '{where}{name}' must be true or false")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key '{where}{name}' must be a number")
            if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
                if not value.is_integer():
                    raise ConfigError(f"config key '{where}{name}' must be an integer")
                value = int(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where.rstrip('.') or 'config'}: {exc}") from exc


def _default_of(cls, name):
    for f in dataclasses.fields(cls):
        if f.name == name:
            if f.default is not dataclasses.MISSING:
                return f.default
            if f.default_factory is not dataclasses.MISSING:
                return f.default_factory()
    return None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


__all__ = [
    "CameraConfig", "DriveConfig", "EvaluationConfig", "LocalizeConfig", "MatchingConfig", "RunConfig",
    "SensorNoiseConfig", "SolverConfig", "WorldConfig", "config_from_dict", "load_config",
]
