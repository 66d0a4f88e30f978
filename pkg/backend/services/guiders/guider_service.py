"""
Guider Service
Creates the emission guider for a render configuration
"""

from services.config import RenderConfig
from services.error_handler import ConfigError

from .base_guider import BaseGuider
from .bound import BoundGuider
from .gaussian import GaussianGuider
from .histogram import H2DGuider
from .mcmc import MCMCGuider
from .models import GuiderKind
from .uniform import UniformGuider
from .vmf import VMFGuider


def create_guider(config: RenderConfig) -> BaseGuider:
    """Creates the right guider for config.guider"""
    kind = GuiderKind(config.guider)
    if kind == GuiderKind.G3D:
        return GaussianGuider(config)
    elif kind == GuiderKind.UNIFORM:
        return UniformGuider(config)
    elif kind == GuiderKind.BOUND:
        return BoundGuider(config)
    elif kind == GuiderKind.H2D:
        return H2DGuider(config)
    elif kind == GuiderKind.VMF:
        return VMFGuider(config)
    elif kind == GuiderKind.MCMC:
        return MCMCGuider(config)
    else:
        raise ConfigError(f"Unknown guider: {kind}", field="guider")
