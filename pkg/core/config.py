"""
Experiment configuration for Quiet Meter
YAML loading with environment expansion, validated into pydantic models
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union
import logging
import math
import os

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.ess import DESK_SCALE_BATTERY, EssParams, rate_bounds, snap_inward
from core.household import HouseholdModel, power_grid
from core.inference import CostMatrix, simplex_grid_size
from core.synthesis import OptimizerConfig, energy_grid

logger = logging.getLogger(__name__)

# Kettle household: column g of the transition holds P(h | g)
KETTLE_PRIOR = [0.95, 0.05]
KETTLE_TRANSITION = [[0.98, 0.34], [0.02, 0.65]]
KETTLE_EMISSION = [[1.0, 0.0], [0.0, 0.17], [0.0, 0.14], [0.0, 0.17]]


class ConfigError(ValueError):
    """Configuration file is missing fields or fails validation"""


class Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EssSettings(Settings):
    v_oc_volts: float = Field(DESK_SCALE_BATTERY["v_oc_volts"], gt=0)
    r_ohms: float = Field(DESK_SCALE_BATTERY["r_ohms"], ge=0)
    eta_c: float = Field(DESK_SCALE_BATTERY["eta_c"], gt=0, le=1)
    eta_d: float = Field(DESK_SCALE_BATTERY["eta_d"], gt=0, le=1)
    gamma_per_month: float = Field(DESK_SCALE_BATTERY["gamma_per_month"], ge=0, lt=1)
    i_max_amps: float = Field(DESK_SCALE_BATTERY["i_max_amps"], ge=0)
    i_min_amps: float = Field(DESK_SCALE_BATTERY["i_min_amps"], ge=0)
    capacity_ah: float = Field(DESK_SCALE_BATTERY["capacity_ah"], gt=0)
    dt_seconds: float = Field(DESK_SCALE_BATTERY["dt_seconds"], gt=0)


class HouseholdSettings(Settings):
    source: Literal["tables", "file", "estimate"] = "tables"
    hypothesis_names: List[str] = Field(default_factory=lambda: ["OFF", "ON"])
    prior: List[float] = Field(default_factory=lambda: list(KETTLE_PRIOR))
    transition: List[List[float]] = Field(default_factory=lambda: [list(r) for r in KETTLE_TRANSITION])
    emission: List[List[float]] = Field(default_factory=lambda: [list(r) for r in KETTLE_EMISSION])
    renormalize: bool = True
    model_file: Optional[str] = None
    training_trace: Optional[str] = None
    alphabet_file: Optional[str] = None
    training_days: int = Field(30, ge=1)

    @model_validator(mode="after")
    def check_source(self) -> "HouseholdSettings":
        if self.source == "file" and not self.model_file:
            raise ValueError("household.source 'file' needs household.model_file")
        return self


class GridSettings(Settings):
    q: float = Field(500.0, gt=0)
    x_max: float = Field(1700.0, ge=0)
    e: float = Field(5.0, gt=0)
    belief_resolution: int = Field(11, ge=2)
    horizon: int = Field(60, ge=1)
    slot_seconds: float = Field(60.0, gt=0)
    d_min: Optional[float] = -1000.0
    d_max: Optional[float] = 1000.0

    @model_validator(mode="after")
    def check_action_range(self) -> "GridSettings":
        for name in ("d_min", "d_max"):
            bound = getattr(self, name)
            if bound is not None and abs(bound / self.q - round(bound / self.q)) > 1e-9:
                raise ValueError(f"grids.{name}={bound} is not a multiple of q={self.q}")
        if self.d_min is not None and self.d_min > 0:
            raise ValueError(f"grids.d_min={self.d_min} must not exceed 0")
        if self.d_max is not None and self.d_max < 0:
            raise ValueError(f"grids.d_max={self.d_max} must not be below 0")
        return self


class SeedSettings(Settings):
    synthesis: int = 0
    data: int = 7
    controller: int = 0


class AttackerSettings(Settings):
    threshold: Optional[float] = Field(None, gt=0)
    slot_tolerance: int = Field(1, ge=0)


class OptimizerSettings(Settings):
    starts: int = Field(4, ge=0)
    iterations: int = Field(120, ge=0)
    step_size: float = Field(0.5, gt=0)
    stochastic_search: bool = True
    max_deterministic_kernels: int = Field(100_000, ge=1)


class ValidationSettings(Settings):
    days: int = Field(30, ge=1)
    trace: Optional[str] = None


class OutputSettings(Settings):
    formats: List[Literal["yaml", "markdown"]] = Field(default_factory=lambda: ["yaml", "markdown"])
    directory: str = "./results"


class LoggingSettings(Settings):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    file: Optional[str] = None
    console: bool = True


class ExperimentConfig(Settings):
    """Everything one experiment needs, mirroring the YAML document"""
    ess: EssSettings = Field(default_factory=EssSettings)
    household: HouseholdSettings = Field(default_factory=HouseholdSettings)
    grids: GridSettings = Field(default_factory=GridSettings)
    costs: Optional[List[List[float]]] = None
    soc_fractions: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0])
    seeds: SeedSettings = Field(default_factory=SeedSettings)
    attacker: AttackerSettings = Field(default_factory=AttackerSettings)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    validation: ValidationSettings = Field(default_factory=ValidationSettings)
    mode: Literal["modal", "sample"] = "modal"
    output: OutputSettings = Field(default_factory=OutputSettings)
    logging: LoggingSettings = Field(default_factory=LoggingSettings)

    @model_validator(mode="after")
    def check_cross_fields(self) -> "ExperimentConfig":
        if abs(self.grids.slot_seconds - self.ess.dt_seconds) > 1e-9:
            raise ValueError(
                f"grids.slot_seconds={self.grids.slot_seconds} differs from ess.dt_seconds={self.ess.dt_seconds}"
            )
        bad = [f for f in self.soc_fractions if not 0.0 <= f <= 1.0]
        if bad:
            raise ValueError(f"soc_fractions outside [0, 1]: {bad}")
        count = len(self.household.prior)
        if self.costs is not None:
            if len(self.costs) != count or any(len(row) != count for row in self.costs):
                raise ValueError(f"costs must be a {count}x{count} matrix")
        if len(self.household.hypothesis_names) != count:
            raise ValueError(
                f"{len(self.household.hypothesis_names)} hypothesis names for {count} hypotheses"
            )
        return self

    @property
    def hypothesis_count(self) -> int:
        return len(self.household.prior)


def expand_env_vars(config: Any) -> Any:
    """Recursively expand ${NAME} strings from the environment"""
    if isinstance(config, dict):
        return {k: expand_env_vars(v) for k, v in config.items()}
    elif isinstance(config, list):
        return [expand_env_vars(item) for item in config]
    elif isinstance(config, str) and config.startswith("${") and config.endswith("}"):
        return os.getenv(config[2:-1], config)
    return config


def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{where}: {item['msg']}")
    return "; ".join(lines)


def config_from_mapping(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(expand_env_vars(data or {}))
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {_format_validation_error(e)}") from e


def load_config(
    config_path: Union[str, Path],
    seed: Optional[int] = None,
    out: Optional[str] = None,
    mode: Optional[str] = None
) -> ExperimentConfig:
    """
    Load and validate an experiment configuration

    Args:
        config_path: YAML file
        seed: Overrides every seed
        out: Overrides output.directory
        mode: Overrides the controller mode

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: If validation fails, naming the offending fields
    """
    config_file = Path(config_path)
    if not config_file.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")

    load_dotenv()
    with open(config_file, 'r') as f:
        data = yaml.safe_load(f) or {}

    if seed is not None:
        data["seeds"] = {name: seed for name in ("synthesis", "data", "controller")}
    if out is not None:
        data.setdefault("output", {})["directory"] = out
    if mode is not None:
        data["mode"] = mode

    config = config_from_mapping(data)
    logger.info(f"Loaded configuration from {config_file}")
    return config


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    config_file = Path(path)
    config_file.parent.mkdir(parents=True, exist_ok=True)
    with open(config_file, 'w') as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)
    return config_file


# ============================================================================
# Builders
# ============================================================================

def build_params(config: ExperimentConfig) -> EssParams:
    return EssParams.from_mapping(config.ess.model_dump())


def build_costs(config: ExperimentConfig) -> CostMatrix:
    if config.costs is None:
        return CostMatrix.zero_one(config.hypothesis_count)
    return CostMatrix(config.costs)


def build_optimizer(config: ExperimentConfig) -> OptimizerConfig:
    return OptimizerConfig(seed=config.seeds.synthesis, **config.optimizer.model_dump())


def build_table_model(config: ExperimentConfig) -> HouseholdModel:
    household = config.household
    return HouseholdModel.from_tables(
        prior=household.prior,
        transition=household.transition,
        emission=household.emission,
        q=config.grids.q,
        x_max=config.grids.x_max,
        hypothesis_names=household.hypothesis_names,
        renormalize=household.renormalize,
    )


def action_range(config: ExperimentConfig, params: Optional[EssParams] = None) -> Tuple[float, float]:
    """Configured battery power range, defaulting to the rate limits snapped to q"""
    grids = config.grids
    if grids.d_min is not None and grids.d_max is not None:
        return grids.d_min, grids.d_max
    rates = rate_bounds(params or build_params(config))
    d_min = snap_inward(rates.d_lo, grids.q) if grids.d_min is None else grids.d_min
    d_max = snap_inward(rates.d_hi, grids.q) if grids.d_max is None else grids.d_max
    return d_min, d_max


def echo_cardinalities(config: ExperimentConfig) -> Dict[str, int]:
    """Lattice sizes the configuration induces"""
    grids = config.grids
    params = build_params(config)
    observations = power_grid(grids.q, grids.x_max)
    d_min, d_max = action_range(config, params)
    outputs = int(round((observations[-1] + d_max - d_min) / grids.q)) + 1
    return {
        "observations": int(observations.shape[0]),
        "outputs": outputs,
        "energy_levels": int(energy_grid(grids.e, params.z_max).shape[0]),
        "beliefs": simplex_grid_size(config.hypothesis_count, grids.belief_resolution),
        "hypotheses": config.hypothesis_count,
        "deterministic_kernels": int(math.pow(outputs, observations.shape[0])),
    }
