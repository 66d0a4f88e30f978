"""
Guider models
Guider kinds and the data types of the baseline distributions
"""

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from services.error_handler import GuidingError


class GuiderKind(str, enum.Enum):
    """Emission strategies"""

    G3D = "g3d"
    UNIFORM = "uniform"
    BOUND = "bound"
    H2D = "h2d"
    VMF = "vmf"
    MCMC = "mcmc"


@dataclass(frozen=True, eq=False)
class VMFLobe:
    """von Mises-Fisher lobe: unit mean direction nu, concentration kappa"""

    nu: np.ndarray
    kappa: float

    def __post_init__(self):
        nu = np.array(self.nu, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(nu) - 1.0) > 1e-9:
            raise GuidingError("vMF mean direction must be a unit vector")
        kappa = float(self.kappa)
        if not (math.isfinite(kappa) and kappa > 0.0):
            raise GuidingError(f"vMF concentration must be positive and finite, got {kappa}")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "kappa", kappa)


@dataclass
class Histogram2D:
    """
    res x res cells over (cos theta in [-1, 1], phi in [0, 2pi)) in a light-local
    frame; every cell covers the same solid angle 4pi / res^2.
    """

    origin: np.ndarray
    tangent: np.ndarray
    bitangent: np.ndarray
    normal: np.ndarray
    res: int = 256
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.res < 1:
            raise GuidingError("Histogram resolution must be positive")
        if self.weights is None:
            self.weights = np.zeros((self.res, self.res))

    @property
    def cell_solid_angle(self) -> float:
        return 4.0 * math.pi / (self.res * self.res)


@dataclass
class BoundGuide:
    """Axis-aligned caster boxes with selection weights"""

    lo: np.ndarray
    hi: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(-1, 3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(-1, 3)
        if self.lo.shape != self.hi.shape or self.lo.shape[0] == 0:
            raise GuidingError("Bound guide needs at least one box")
        if np.any(self.hi - self.lo <= 0.0):
            raise GuidingError("Bound guide boxes must have positive volume")
        n = self.lo.shape[0]
        w = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-9:
            raise GuidingError("Bound weights must be a probability vector")
        self.weights = w

    @property
    def volume(self) -> np.ndarray:
        return np.prod(self.hi - self.lo, axis=1)

    def __len__(self) -> int:
        return self.lo.shape[0]


@dataclass
class MCMCChains:
    """
    All Metropolis chains, vectorized.

    state: (C, dim) last accepted primary-sample vectors in [0, 1)
    seeded: chains that have accepted at least once
    visible / proposals: running tally of uniform proposals and how many were visible
    """

    state: np.ndarray
    seeded: np.ndarray
    visible: float = 0.0
    proposals: float = 0.0

    @classmethod
    def fresh(cls, chains: int, dim: int) -> "MCMCChains":
        return cls(np.zeros((chains, dim)), np.zeros(chains, dtype=bool))

    def __len__(self) -> int:
        return self.state.shape[0]

    @property
    def b_hat(self) -> float:
        """Fraction of uniform proposals that were visible"""
        return self.visible / self.proposals if self.proposals > 0 else 0.0
