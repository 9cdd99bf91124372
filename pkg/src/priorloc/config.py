"""Pipeline configuration: one YAML file, one section per parameter group.

Every key is validated on load and unknown keys are rejected with their
dotted path.  Command-line overrides use the same dotted names.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import yaml

from .evaluation import DEFAULT_OUTLIER_THRESHOLD, TIME_TOLERANCE
from .ground import CsfParams
from .localization import LocalizerConfig
from .mapcraft import MlsParams, UniformSamplingParams
from .registration import IcpParams
from .traversability import TraversabilityParams


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass
class EvalParams:
    outlier_threshold: float = DEFAULT_OUTLIER_THRESHOLD
    time_tolerance: float = TIME_TOLERANCE

    def __post_init__(self):
        if not self.outlier_threshold > 0:
            raise ValueError("outlier_threshold must be positive")
        if not self.time_tolerance > 0:
            raise ValueError("time_tolerance must be positive")


@dataclass
class LocalizeParams:
    init_scan_count: int = 10
    init_fitness_threshold: float = 0.01
    # seconds on the sequence clock; inf keeps the prior map frozen
    map_update_enable_time: float = math.inf
    scan_downsample_voxel: float = 0.1
    velocity_smoothing: float = 0.5
    leaf_size: int = 16
    rebuild_ratio: float = 0.3


def _refine_default():
    return IcpParams(max_iterations=30, max_correspondence_distance=0.5)


SECTIONS = {
    "sample": UniformSamplingParams,
    "mls": MlsParams,
    "ground": CsfParams,
    "traverse": TraversabilityParams,
    "localize": LocalizeParams,
    "icp": IcpParams,
    "refine": IcpParams,
    "eval": EvalParams,
}

SECTION_HELP = {
    "sample": "uniform voxel sampling before smoothing",
    "mls": "moving least squares smoothing",
    "ground": "cloth simulation ground filter",
    "traverse": "elevation grid and traversability filters",
    "localize": "initialization and tracking",
    "icp": "point-to-point ICP used for initialization",
    "refine": "point-to-plane refinement used for tracking",
    "eval": "cloud-to-cloud evaluation",
}


@dataclass
class PipelineConfig:
    # None defers to the seed in the scene file
    seed: Optional[int] = None
    sample: UniformSamplingParams = field(default_factory=UniformSamplingParams)
    mls: MlsParams = field(default_factory=MlsParams)
    ground: CsfParams = field(default_factory=CsfParams)
    traverse: TraversabilityParams = field(default_factory=TraversabilityParams)
    localize: LocalizeParams = field(default_factory=LocalizeParams)
    icp: IcpParams = field(default_factory=IcpParams)
    refine: IcpParams = field(default_factory=_refine_default)
    eval: EvalParams = field(default_factory=EvalParams)

    def localizer_config(self) -> LocalizerConfig:
        return LocalizerConfig(icp_params=self.icp, refine_params=self.refine,
                               **dataclasses.asdict(self.localize))

    def to_dict(self) -> dict:
        out: Dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out


def default_sections() -> Dict[str, Any]:
    return {name: getattr(PipelineConfig(), name) for name in SECTIONS}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None:
            if default is None:
                return None
            raise ConfigError(key, "value may not be null")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    raise ConfigError(key, "unsupported option type")


def _build_section(name: str, base, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(name, "expected a mapping")
    current = dataclasses.asdict(base)
    for k, v in values.items():
        key = f"{name}.{k}"
        if k not in current:
            raise ConfigError(key, "unknown key")
        current[k] = _coerce(key, v, getattr(type(base)(), k))
    try:
        return type(base)(**current)
    except (ValueError, TypeError) as exc:
        raise ConfigError(name, str(exc)) from None


def _apply(cfg: PipelineConfig, data: dict) -> PipelineConfig:
    cfg = copy.deepcopy(cfg)
    for k, v in data.items():
        if k == "seed":
            if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v < 0):
                raise ConfigError("seed", f"expected a nonnegative integer, got {v!r}")
            cfg.seed = v
        elif k in SECTIONS:
            setattr(cfg, k, _build_section(k, getattr(cfg, k), {} if v is None else v))
        else:
            raise ConfigError(str(k), "unknown key")
    return cfg


def config_from_dict(data: Optional[dict]) -> PipelineConfig:
    if data is None:
        return PipelineConfig()
    if not isinstance(data, dict):
        raise ConfigError("", "config root must be a mapping")
    return _apply(PipelineConfig(), data)


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError("", f"invalid YAML: {exc}") from None
    return config_from_dict(data)


def parse_override_value(text: str):
    """Typed value for a command-line override (YAML scalar syntax)."""
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    if isinstance(value, str):
        # YAML spells infinity ".inf"; accept the plain float spellings too
        try:
            return float(value)
        except ValueError:
            return value
    return value


def apply_overrides(cfg: PipelineConfig, overrides: Dict[str, Any]) -> PipelineConfig:
    """``overrides`` maps dotted keys (``ground.rigidness``) to raw values."""
    nested: Dict[str, Any] = {}
    for key, value in overrides.items():
        if key == "seed":
            nested["seed"] = value
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(key, "unknown key")
        nested.setdefault(section, {})[name] = value
    return _apply(cfg, nested)


def section_keys(section: str):
    """``(key, default)`` pairs for the help text."""
    base = default_sections()[section]
    return [(f.name, getattr(base, f.name)) for f in dataclasses.fields(base)]
