"""Configuration management for Inner Gaussian Splatting."""

import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import InvalidConfigError
from .scene.models import Axis, BoxMode, SelectionMethod

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-wide settings loaded from environment variables."""

    # ==========================================
    # APPLICATION CONFIGURATION
    # ==========================================
    log_level: str = "INFO"
    threads: int = 0  # 0 = machine parallelism, 1 = bitwise deterministic
    out_dir: str = "./runs"

    # ==========================================
    # RENDERING / TRAINING DEFAULTS
    # CLI flags and config files override these.
    # ==========================================
    tile_size: int = 16
    seed: int = 0
    checkpoint_every: int = 250  # steps between checkpoints, 0 disables

    model_config = SettingsConfigDict(
        env_prefix="INNERGS_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )

    @property
    def effective_threads(self) -> int:
        """Resolve threads=0 to the machine's CPU count."""
        if self.threads > 0:
            return self.threads
        return os.cpu_count() or 1

    def ensure_out_directory(self, out_dir: Optional[str] = None) -> Path:
        """Ensure the output directory exists and return it."""
        path = Path(out_dir or self.out_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path


# Global settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create settings instance."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


class InitConfig(BaseModel):
    """Default parameters for grid-initialized Gaussians."""

    model_config = ConfigDict(extra="forbid")

    opacity: float = Field(0.1, gt=0.0, lt=1.0)
    intensity: float = Field(0.5, gt=0.0, lt=1.0)
    scale_fraction: float = Field(0.5, gt=0.0)  # initial std as a fraction of grid spacing
    dtype: str = "float32"

    @field_validator("dtype")
    @classmethod
    def _known_dtype(cls, value: str) -> str:
        if value not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return value


class TrainConfig(BaseModel):
    """Every knob of the training loop; serialises to the JSON config file."""

    model_config = ConfigDict(extra="forbid")

    # Learning rates per parameter group. lr_mean is a fraction of scene extent.
    lr_mean: float = Field(1.6e-3, ge=0.0)
    lr_log_scale: float = Field(5e-3, ge=0.0)
    lr_rotation: float = Field(1e-3, ge=0.0)
    lr_opacity: float = Field(5e-2, ge=0.0)
    lr_intensity: float = Field(2.5e-2, ge=0.0)

    max_steps: int = Field(1000, ge=0)
    convergence_window: int = Field(100, ge=1)
    convergence_delta: float = Field(1e-4, ge=0.0)

    # Refinement (prune / split / clone)
    refine_enabled: bool = True
    refine_interval: int = Field(100, ge=1)
    refine_start: int = Field(100, ge=0)
    refine_stop: int = Field(800, ge=0)
    tau_alpha: float = Field(0.005, ge=0.0, lt=1.0)
    tau_p: float = Field(2e-4, ge=0.0)
    tau_s: float = Field(0.01, gt=0.0)  # fraction of scene extent for the split/clone test
    too_large_fraction: float = Field(0.5, gt=0.0)
    split_scale_divisor: float = Field(1.6, gt=1.0)
    clone_jitter: float = Field(0.05, ge=0.0)  # fraction of grid spacing

    ssim_weight: float = Field(0.2, ge=0.0, le=1.0)

    grid_resolution: int = Field(42, ge=2)
    init: InitConfig = Field(default_factory=InitConfig)

    method: SelectionMethod = SelectionMethod.M2
    epsilon: float = Field(0.01, gt=0.0, lt=1.0)
    box_mode: BoxMode = BoxMode.EXACT
    tile_size: int = Field(16, ge=1)
    min_transmittance: float = Field(1e-4, ge=0.0, lt=1.0)

    axes: list[Axis] = Field(default_factory=lambda: [Axis.X, Axis.Y, Axis.Z])
    test_fraction: float = Field(0.05, gt=0.0, lt=0.5)
    slices_per_step: Optional[int] = Field(None, ge=1)  # None = every training slice

    seed: int = 0
    threads: int = Field(1, ge=0)
    checkpoint_every: int = Field(250, ge=0)

    @model_validator(mode="after")
    def _check_refine_window(self) -> "TrainConfig":
        if self.refine_start >= self.refine_stop:
            raise ValueError("refine_start must be < refine_stop")
        if self.refine_stop > self.max_steps and self.refine_enabled:
            logger.debug(
                "refine_stop=%d exceeds max_steps=%d; later refinements never run",
                self.refine_stop, self.max_steps,
            )
        return self

    @property
    def learning_rates(self) -> dict[str, float]:
        """Per-group rates keyed by GaussianCloud parameter name (mean unscaled)."""
        return {
            "means": self.lr_mean,
            "log_scales": self.lr_log_scale,
            "rotations": self.lr_rotation,
            "opacity_raw": self.lr_opacity,
            "intensity_raw": self.lr_intensity,
        }

    @property
    def method1_sigma_cutoff(self) -> float:
        """Cube radius multiplier covering the epsilon-support."""
        return method1_cutoff(self.epsilon)


class SimulationConfig(BaseModel):
    """Candidate-selection benchmark parameters."""

    model_config = ConfigDict(extra="forbid")

    volume_size: int = Field(20, ge=4)
    num_gaussians: int = Field(50, ge=1)
    mean_low: float = 5.0
    mean_high: float = 15.0
    epsilon: float = Field(0.01, gt=0.0, lt=1.0)
    scale_low: float = Field(0.5, gt=0.0)  # log-uniform std range, world units
    scale_high: float = Field(2.5, gt=0.0)
    box_mode: BoxMode = BoxMode.CAPPED
    axes: list[Axis] = Field(default_factory=lambda: [Axis.X, Axis.Y, Axis.Z])
    seed: int = 0
    repetitions: int = Field(1, ge=1)
    tile_size: int = Field(16, ge=1)
    threads: int = Field(1, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SimulationConfig":
        if not 0.0 <= self.mean_low < self.mean_high <= self.volume_size:
            raise ValueError("mean range must lie inside the volume")
        if self.scale_low > self.scale_high:
            raise ValueError("scale_low must not exceed scale_high")
        if not self.axes:
            raise ValueError("at least one axis is required")
        return self


def method1_cutoff(epsilon: float) -> float:
    """Smallest cube multiplier >= 3 whose cube covers {density >= epsilon}."""
    return max(3.0, math.sqrt(2.0 * math.log(1.0 / epsilon)))


def load_config(
    model: type[BaseModel],
    path: Optional[str],
    overrides: dict[str, Any],
    defaults: Optional[dict[str, Any]] = None,
) -> Any:
    """Load a JSON config file (optional) and apply non-None overrides.

    Precedence, lowest first: defaults, config file, overrides.

    Args:
        model: TrainConfig or SimulationConfig
        path: JSON file with any subset of the model's fields
        overrides: Flag values; None means "not given on the command line"
        defaults: Environment-derived values, applied only to fields the model has

    Returns:
        Validated config instance
    """
    data: dict[str, Any] = {k: v for k, v in (defaults or {}).items() if k in model.model_fields}
    file_data: dict[str, Any] = {}
    if path:
        try:
            file_data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise InvalidConfigError(f"Config {path} is not valid JSON: {e}") from e
        if not isinstance(file_data, dict):
            raise InvalidConfigError(f"Config {path} must hold a JSON object")

    data.update(file_data)
    data.update({k: v for k, v in overrides.items() if v is not None})

    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise InvalidConfigError(str(e).replace("\n", "; ")) from e
