"""Engine configuration: one TOML file drives every pipeline stage.

Defaults follow the published training recipe wherever a value exists
(loss weighting, optimizer, schedule, augmentation magnitudes, rebalancing
targets, windowing caps, candidate gates); unknown keys are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import io
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .calibration import DEFAULT_BINS
from .model import ModelConfig
from .referee import ExplainerConfig
from .tracker import TrackerConfig
from .training import AugmentConfig, RebalanceConfig, TrainConfig
from .windowing import HALF_STEP_LOOKAHEAD, NMS_OVERLAP_THRESHOLD, W_INITIAL, W_MAX


@dataclass
class CalibrationConfig:
    bins: int = DEFAULT_BINS
    threshold_grid_start: float = 0.05
    threshold_grid_stop: float = 0.95
    threshold_grid_step: float = 0.01
    temperature_min: float = 0.05
    temperature_max: float = 20.0


@dataclass
class WindowConfig:
    w_max: int = W_MAX
    w_initial: int = W_INITIAL
    nms_overlap_threshold: float = NMS_OVERLAP_THRESHOLD
    half_step_lookahead: int = HALF_STEP_LOOKAHEAD


@dataclass
class SynthConfig:
    n_clips: int = 20
    steps_per_script: int = 4
    noise_sigma: float = 0.0
    occlusion_probability: float = 0.0
    distractor: bool = False
    frame_width: int = 1280
    frame_height: int = 720


@dataclass
class EngineConfig:
    seed: int = 0
    jobs: int = 1
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    rebalance: RebalanceConfig = field(default_factory=RebalanceConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    explainer: ExplainerConfig = field(default_factory=ExplainerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


class ConfigError(ValueError):
    pass


def _coerce(value, target_type):
    # TOML has no tuples; lists coerce back for tuple-typed fields.
    if isinstance(value, list):
        return tuple(value)
    return value


def _apply_section(obj, data: dict, section: str) -> None:
    valid = {f.name for f in fields(obj)}
    for key, value in data.items():
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        setattr(obj, key, _coerce(value, None))


def load_config(path) -> EngineConfig:
    """Parse a TOML config; unknown sections or keys raise ConfigError."""
    raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    config = EngineConfig()
    sections = {f.name: f for f in fields(EngineConfig)}
    model_overrides = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in sections or not is_dataclass(getattr(config, key)):
                raise ConfigError(f"unknown section [{key}]")
            if key == "model":
                valid = {f.name for f in fields(ModelConfig)}
                for k, v in value.items():
                    if k not in valid:
                        raise ConfigError(f"unknown key {k!r} in section [model]")
                    model_overrides[k] = _coerce(v, None)
            else:
                _apply_section(getattr(config, key), value, key)
        elif key in ("seed", "jobs"):
            setattr(config, key, int(value))
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    if model_overrides:
        base = asdict(config.model)
        base.update(model_overrides)
        config.model = ModelConfig(**base)
    return config


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def dump_config(config: EngineConfig) -> str:
    """Render the full configuration, defaults included, as TOML."""
    lines = [f"seed = {config.seed}", f"jobs = {config.jobs}", ""]
    for f in fields(EngineConfig):
        section = getattr(config, f.name)
        if not is_dataclass(section):
            continue
        lines.append(f"[{f.name}]")
        for sub in fields(section):
            lines.append(f"{sub.name} = {_format_value(getattr(section, sub.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(path, config: EngineConfig) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")
