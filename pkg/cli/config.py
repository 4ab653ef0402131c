import logging
import os
from typing import Any, Dict, List, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from db.artifacts import read_json
from field_core.errors import ConfigurationError
from integrators.bohm_integrator import IntegratorConfig
from propagation.propagator import PropagatorConfig

logger = logging.getLogger(__name__)

DEFAULTS_FILE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config", "settings.yaml")
OUTPUT_DIR_ENV = "BOHM_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "output"

Command = Literal["trajectories", "ensemble", "flux-audit", "nodes", "quantile-check", "evolve"]


class PhysicsConstants(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    hbar: float = Field(1.0, gt=0)
    mass: float = Field(1.0, gt=0)
    omega: float = Field(1.0, gt=0)


class GridSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    start: float = -12.0
    stop: float = 12.0
    n: int = Field(512, ge=16)

    @model_validator(mode="after")
    def check_extent(self):
        if not self.stop > self.start:
            raise ValueError(f"grid stop must exceed start, got [{self.start}, {self.stop}]")
        return self


class RegionLadder(BaseModel):
    """Ladders of good-region radii audited in one run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    eps: List[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05], min_length=1)
    delta: List[float] = Field(default_factory=lambda: [0.1], min_length=1)
    r: float = Field(10.0, gt=0)
    T: float = Field(3.141592653589793, gt=0)
    time_weight: float = Field(1.0, gt=0)
    radii: List[float] = Field(default_factory=lambda: [4.0, 6.0, 8.0])

    @field_validator("eps", "delta", "radii")
    @classmethod
    def check_positive(cls, values: List[float]) -> List[float]:
        if any(v <= 0 for v in values):
            raise ValueError("radii must be positive")
        return values


class EnsembleSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    count: int = Field(100_000, gt=0)
    seed: int = Field(7, ge=0)
    times: List[float] = Field(default_factory=lambda: [0.39269908169872414, 0.7853981633974483,
                                                        1.5707963267948966, 3.141592653589793])
    mc_count: int = Field(20_000, ge=0)


class TrajectorySpec(BaseModel):
    """Fan of initial conditions for the trajectory plot data."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    fan_count: int = Field(25, gt=0)
    fan_start: float = -3.0
    fan_stop: float = 3.0
    T: float = Field(6.283185307179586, gt=0)
    samples: int = Field(257, ge=2)


class ScenarioConfig(BaseModel):
    """Everything one run depends on; its JSON echo reproduces the run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    command: Command
    scenario: str = "eq4"
    physics: PhysicsConstants = PhysicsConstants()
    grid: GridSpec = GridSpec()
    propagator: PropagatorConfig = PropagatorConfig()
    integrator: IntegratorConfig = IntegratorConfig()
    region: RegionLadder = RegionLadder()
    ensemble: EnsembleSpec = EnsembleSpec()
    trajectories: TrajectorySpec = TrajectorySpec()
    window: List[List[float]] = Field(default_factory=lambda: [[-2.0, 2.0], [-0.5, 2.0]])
    t: float = 0.7853981633974483
    output_dir: str = DEFAULT_OUTPUT_DIR
    progress: bool = False

    @field_validator("window")
    @classmethod
    def check_window(cls, window: List[List[float]]) -> List[List[float]]:
        if len(window) not in (2, 3) or any(len(r) != 2 or r[1] <= r[0] for r in window):
            raise ValueError("window needs increasing (min, max) ranges: spatial axes then time")
        return window


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_defaults(path: str = DEFAULTS_FILE) -> Dict[str, Any]:
    if not os.path.exists(path):
        logger.debug(f"No defaults file at {path}")
        return {}
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Malformed defaults file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"Defaults file {path} must hold a mapping")
    return data


def parse_window(text: str) -> List[List[float]]:
    """Parse 'qa:qbxta:tb' (or 'xa:xbxya:ybxta:tb') into ranges."""
    try:
        ranges = [[float(v) for v in part.split(":")] for part in text.split("x")]
    except ValueError as e:
        raise ConfigurationError(f"Malformed window '{text}': {e}") from e
    if any(len(r) != 2 for r in ranges):
        raise ConfigurationError(f"Malformed window '{text}': expected a:b ranges joined by 'x'")
    return ranges


def parse_ladder(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigurationError(f"Malformed list '{text}': {e}") from e


def flag_overrides(args) -> Dict[str, Any]:
    """Nested overrides from the command-line flags that were given."""
    overrides: Dict[str, Any] = {"command": args.command}
    simple = {"scenario": "scenario", "t": "t", "output_dir": "output_dir"}
    for flag, key in simple.items():
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if getattr(args, "progress", False):
        overrides["progress"] = True
    if getattr(args, "window", None):
        overrides["window"] = parse_window(args.window)
    nested = {
        ("region", "eps"): ("eps", parse_ladder),
        ("region", "delta"): ("delta", parse_ladder),
        ("region", "r"): ("r", float),
        ("region", "T"): ("T", float),
        ("ensemble", "mc_count"): ("mc", int),
        ("ensemble", "seed"): ("seed", int),
        ("ensemble", "count"): ("count", int),
        ("grid", "n"): ("n", int),
        ("propagator", "dt"): ("dt", float),
    }
    for (section, key), (flag, convert) in nested.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = convert(value)
    return overrides


def resolve_config(args, defaults_path: str = DEFAULTS_FILE) -> ScenarioConfig:
    """Layer the defaults file, the --config JSON file and the flags.

    Returns:
        Validated ScenarioConfig; pydantic errors propagate to the caller
    """
    data = load_defaults(defaults_path)
    env_dir = os.getenv(OUTPUT_DIR_ENV)
    if env_dir:
        data["output_dir"] = env_dir
    if getattr(args, "config", None):
        data = _merge(data, read_json(args.config))
    data = _merge(data, flag_overrides(args))
    return ScenarioConfig(**data)

