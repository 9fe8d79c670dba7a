"""
DRSYNTH - Experiment Configuration
TOML experiment files (nested sections) + DRS_* environment runtime settings
"""

import logging
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError
from timeseries_data import MONTH_PATTERN

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

# Fixed model identifiers; group names may not reuse them
MODEL_NAMES = ("DRS", "DRS_direct", "EW", "BMA", "LASSO", "PCA", "HA", "full")
# Run when forecast.models is unset; "groups" expands to every single-group model
DEFAULT_MODELS = ("DRS", "EW", "BMA", "LASSO", "PCA", "HA", "full", "groups")
KNOWN_MODELS = {*MODEL_NAMES, "groups"}


class DataSection(BaseModel):
    """Input files and panel schema"""

    panel_path: Path
    groups_path: Path
    target: str
    date_column: str = "date"
    risk_free: Optional[str] = None
    predictors: Optional[List[str]] = None
    standardize: bool = False
    intercept: bool = True


class SplitSection(BaseModel):
    """Three-phase schedule: agents only, synthesis calibration, scored evaluation"""

    train_end: str
    calibration_end: str
    evaluation_end: str

    @field_validator("train_end", "calibration_end", "evaluation_end")
    @classmethod
    def _monthly_stamp(cls, value: str) -> str:
        if not MONTH_PATTERN.match(value):
            raise ValueError(f"expected YYYY-MM, got '{value}'")
        return value

    @model_validator(mode="after")
    def _ordered(self) -> "SplitSection":
        # YYYY-MM strings sort chronologically
        if not (self.train_end < self.calibration_end < self.evaluation_end):
            raise ValueError(
                f"split dates must satisfy train_end < calibration_end < evaluation_end "
                f"(got {self.train_end}, {self.calibration_end}, {self.evaluation_end})"
            )
        return self


class ForecastSection(BaseModel):
    horizons: List[int] = Field(default_factory=lambda: [1])
    multi_step_mode: Literal["customized", "direct", "both"] = "customized"
    models: Optional[List[str]] = None
    reference_model: str = "DRS"

    @field_validator("horizons")
    @classmethod
    def _positive_horizons(cls, value: List[int]) -> List[int]:
        if not value or any(k < 1 for k in value):
            raise ValueError("horizons must be a non-empty list of integers >= 1")
        return sorted(set(value))

    @field_validator("models")
    @classmethod
    def _known_models(cls, value: Optional[List[str]]) -> Optional[List[str]]:
        if value is None:
            return value
        unknown = [m for m in value if m not in KNOWN_MODELS]
        if unknown:
            raise ValueError(f"unknown models {unknown}; choose from {sorted(KNOWN_MODELS)}")
        return value


class DiscountSection(BaseModel):
    """Discount factors and the normal/inverse-gamma prior of one DLM component"""

    delta: float = Field(0.99, gt=0.0, le=1.0, description="state discount, R = C/delta")
    beta: float = Field(0.95, gt=0.0, le=1.0, description="volatility discount, n' = beta*n + 1")
    n0: float = Field(10.0, gt=0.0)
    s0: float = Field(0.01, gt=0.0)


class SynthesisSection(DiscountSection):
    # None means (0, 1/J, ..., 1/J)
    m0: Optional[List[float]] = None


class MCMCSection(BaseModel):
    burn_in: int = Field(2000, ge=0)
    n_saved: int = Field(3000, ge=1)
    origin_stride: int = Field(1, ge=1)
    warm_start: bool = False
    predictive_replicates: int = Field(1, ge=1)
    dump_draws: bool = False


class BaselineSection(BaseModel):
    lasso_grid_size: int = Field(100, ge=1)
    lasso_min_ratio: float = Field(1e-4, gt=0.0, lt=1.0)
    lasso_max_sweeps: int = Field(10000, ge=1)
    lasso_tol: float = Field(1e-10, gt=0.0)
    pca_factors: int = Field(5, ge=1)
    variance_floor: float = Field(1e-8, gt=0.0)


class PortfolioSection(BaseModel):
    enabled: bool = False
    gamma: float = Field(5.0, gt=0.0)
    unconstrained_bounds: Tuple[float, float] = (-1.0, 2.0)
    constrained_bounds: Tuple[float, float] = (0.0, 1.0)
    step: float = Field(0.01, gt=0.0)
    n_draws: int = Field(3000, ge=1)
    annualize: bool = False
    periods_per_year: int = Field(12, ge=1)

    @field_validator("gamma")
    @classmethod
    def _not_log_utility(cls, value: float) -> float:
        if value == 1.0:
            raise ValueError("gamma = 1 (log utility) is not supported by the power-utility CER")
        return value


class ExperimentConfig(BaseModel):
    """Complete description of one decouple-recouple experiment"""

    data: DataSection
    splits: SplitSection
    forecast: ForecastSection = Field(default_factory=ForecastSection)
    agents: DiscountSection = Field(default_factory=DiscountSection)
    synthesis: SynthesisSection = Field(default_factory=SynthesisSection)
    mcmc: MCMCSection = Field(default_factory=MCMCSection)
    baselines: BaselineSection = Field(default_factory=BaselineSection)
    portfolio: PortfolioSection = Field(default_factory=PortfolioSection)
    seed: int = 0
    output_dir: Path = Path("results")


class RuntimeSettings(BaseSettings):
    """Process-level settings read from DRS_* environment variables or .env"""

    model_config = SettingsConfigDict(env_prefix="DRS_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    workers: int = 1
    rich_tracebacks: bool = False


def _resolve(base: Path, value: Any) -> Any:
    if value is None:
        return value
    path = Path(value)
    return path if path.is_absolute() else (base / path)


def load_experiment_config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a TOML experiment file, apply CLI overrides and validate"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")

    try:
        with open(path, "rb") as handle:
            raw = tomllib.load(handle)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e

    base = path.parent
    data = raw.setdefault("data", {})
    for key in ("panel_path", "groups_path"):
        if key in data:
            data[key] = _resolve(base, data[key])
    if "output_dir" in raw:
        raw["output_dir"] = _resolve(base, raw["output_dir"])

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section = raw
        *parents, leaf = dotted.split(".")
        for parent in parents:
            section = section.setdefault(parent, {})
        section[leaf] = value

    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config {path}:\n{e}") from e

    logger.info(f"✅ Configuration loaded: {path.name} (seed={cfg.seed}, horizons={cfg.forecast.horizons})")
    return cfg


# Global runtime settings instance
settings = RuntimeSettings()
