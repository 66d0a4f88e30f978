"""
Render configuration
Defaults, environment overrides (CAUSTICA_*) and validation.
"""

import enum
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from services.error_handler import ConfigError
from services.gmath import ErfBackend
from services.guiders.models import GuiderKind

load_dotenv()

__all__ = [
    "BetaSchedule",
    "ErfBackend",
    "GuiderKind",
    "InitializerMode",
    "LightSamplerMode",
    "LightTreeUpdate",
    "RenderConfig",
    "load_config",
]


class InitializerMode(str, enum.Enum):
    GEOMETRY = "geometry"
    NAIVE = "naive"
    OFF = "off"


class LightSamplerMode(str, enum.Enum):
    ADAPTIVE = "adaptive"
    UNIFORM = "uniform"


class BetaSchedule(str, enum.Enum):
    FIXED = "fixed"
    LINEAR = "linear"


class LightTreeUpdate(str, enum.Enum):
    DECAY = "decay"
    REPLACE = "replace"


# field name -> environment variable
ENV_OVERRIDES: Dict[str, str] = {
    "guider": "CAUSTICA_GUIDER",
    "iterations": "CAUSTICA_ITERATIONS",
    "photons_per_iteration": "CAUSTICA_PHOTONS",
    "beta": "CAUSTICA_BETA",
    "beta_schedule": "CAUSTICA_BETA_SCHEDULE",
    "components": "CAUSTICA_COMPONENTS",
    "seed": "CAUSTICA_SEED",
    "initializer": "CAUSTICA_INITIALIZER",
    "light_sampler": "CAUSTICA_LIGHT_SAMPLER",
    "light_tree_update": "CAUSTICA_LIGHT_TREE_UPDATE",
    "max_depth": "CAUSTICA_MAX_DEPTH",
    "max_radius_factor": "CAUSTICA_MAX_RADIUS_FACTOR",
    "workers": "CAUSTICA_WORKERS",
    "chunk_size": "CAUSTICA_CHUNK_SIZE",
    "erf_backend": "CAUSTICA_ERF_BACKEND",
    "output_dir": "CAUSTICA_OUTPUT_DIR",
}


class RenderConfig(BaseModel):
    """Everything that determines a render besides the scene"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    guider: GuiderKind = GuiderKind.G3D
    iterations: int = Field(default=64, ge=1)
    photons_per_iteration: int = Field(default=2**16, ge=1)
    beta: float = Field(default=0.8, ge=0.0, le=1.0)
    beta_schedule: Optional[BetaSchedule] = None
    linear_beta_max: float = Field(default=0.75, ge=0.0, le=1.0)
    linear_beta_iterations: int = Field(default=128, ge=1)
    components: int = Field(default=32, ge=1)
    seed: int = Field(default=0, ge=0)

    initializer: InitializerMode = InitializerMode.GEOMETRY
    k_per_geometry: int = Field(default=16, ge=1)
    init_photons: int = Field(default=2**16, ge=1)
    geometry_samples: int = Field(default=4096, ge=1)
    kmeans_iters: int = Field(default=32, ge=1)

    light_sampler: LightSamplerMode = LightSamplerMode.ADAPTIVE
    light_tree_update: LightTreeUpdate = LightTreeUpdate.DECAY
    branch_threshold: int = Field(default=64, ge=1)
    light_tree_prior: float = Field(default=1.0, gt=0.0)

    max_depth: int = Field(default=8, ge=2)
    max_radius_factor: float = Field(default=0.05, gt=0.0)
    gather_k: int = Field(default=4, ge=1)

    h2d_resolution: int = Field(default=256, ge=1)
    mcmc_chains: int = Field(default=1024, ge=1)
    mcmc_sigma: float = Field(default=0.001, gt=0.0)
    mcmc_bootstrap_ratio: int = Field(default=64, ge=1)

    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)

    erf_backend: ErfBackend = ErfBackend.SCIPY
    workers: int = Field(default=1, ge=1)
    chunk_size: int = Field(default=8192, ge=1)

    output_dir: Path = Path("out")
    reference: Optional[Path] = None

    @field_validator("guider", "initializer", "light_sampler", "beta_schedule", "light_tree_update", "erf_backend", mode="before")
    @classmethod
    def _lowercase_enum(cls, v):
        return v.lower() if isinstance(v, str) else v

    @property
    def effective_beta_schedule(self) -> BetaSchedule:
        """The set schedule, else linear for the directional baselines and fixed otherwise"""
        if self.beta_schedule is not None:
            return self.beta_schedule
        if self.guider in (GuiderKind.H2D, GuiderKind.VMF):
            return BetaSchedule.LINEAR
        return BetaSchedule.FIXED

    def beta_at(self, iteration: int) -> float:
        """Selection probability of the guided branch at a (post-init) iteration"""
        if iteration <= 0:
            return 0.0
        if self.guider is GuiderKind.BOUND:
            return 1.0
        if self.effective_beta_schedule is BetaSchedule.LINEAR:
            ramp = min(iteration / self.linear_beta_iterations, 1.0)
            return self.linear_beta_max * ramp
        return self.beta


def _env_values() -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for name, var in ENV_OVERRIDES.items():
        raw = os.getenv(var)
        if raw is not None and raw.strip() != "":
            values[name] = raw.strip()
    return values


def load_config(**overrides: Any) -> RenderConfig:
    """
    Builds a RenderConfig from defaults, then CAUSTICA_* environment variables,
    then explicit overrides (CLI flags). None-valued overrides are ignored.

    Raises:
        ConfigError: naming the first invalid field
    """
    values = _env_values()
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RenderConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first.get("loc", ())) or None
        raise ConfigError(f"Invalid config field '{field}': {first.get('msg')}", field=field) from e
