"""
Guiding math
Isotropic 3D Gaussians, mixtures, the directional transform and its samplers.

All functions are vectorized over leading axes: a point or direction may be a
single (3,) vector or an (..., 3) batch. Everything is float64.
"""

import enum
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from services.error_handler import GuidingError

ArrayLike = Union[np.ndarray, Sequence[float]]

SQRT_HALF_PI = math.sqrt(math.pi / 2.0)
INV_SQRT2 = 1.0 / math.sqrt(2.0)
NORM_3D = (2.0 * math.pi) ** 1.5
INV_4PI = 1.0 / (4.0 * math.pi)
POLE = np.array([0.0, 0.0, 1.0])

# Abramowitz & Stegun 7.1.26
_AS_P = 0.3275911
_AS_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)


class ErfBackend(str, enum.Enum):
    """How the error function inside the closed form is evaluated"""

    SCIPY = "scipy"
    APPROX = "approx"


_erf_backend = ErfBackend.SCIPY


def set_erf_backend(backend: Union[ErfBackend, str]) -> None:
    global _erf_backend
    _erf_backend = ErfBackend(backend)


def get_erf_backend() -> ErfBackend:
    return _erf_backend


def _vec3(x: ArrayLike, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape[-1:] != (3,):
        raise GuidingError(f"{name} must have a trailing axis of length 3, got {v.shape}")
    return v


@dataclass(frozen=True, eq=False)
class Gaussian3:
    """Isotropic 3D Gaussian with mean `mu` and standard deviation `sigma` (world units)"""

    mu: np.ndarray
    sigma: float

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(mu)):
            raise GuidingError(f"Gaussian mean must be finite, got {mu}")
        sigma = float(self.sigma)
        if not (math.isfinite(sigma) and sigma > 0.0):
            raise GuidingError(f"Gaussian sigma must be positive and finite, got {sigma}")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True, eq=False)
class Gaussian2:
    """Isotropic 2D Gaussian in a plane frame"""

    mu2: np.ndarray
    sigma: float

    def __post_init__(self):
        mu2 = np.array(self.mu2, dtype=np.float64).reshape(2)
        sigma = float(self.sigma)
        if not (math.isfinite(sigma) and sigma > 0.0):
            raise GuidingError(f"Gaussian sigma must be positive and finite, got {sigma}")
        mu2.setflags(write=False)
        object.__setattr__(self, "mu2", mu2)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """
    Weighted mixture of isotropic 3D Gaussians, stored as parallel arrays.

    Args:
        weights: (N,) nonnegative, summing to 1
        means: (N, 3)
        sigmas: (N,) positive
    """

    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64).reshape(-1, 3)
        s = np.array(self.sigmas, dtype=np.float64).reshape(-1)
        if w.size == 0:
            raise GuidingError("A mixture needs at least one component")
        if not (w.size == mu.shape[0] == s.size):
            raise GuidingError(
                f"Component arrays disagree: {w.size} weights, {mu.shape[0]} means, {s.size} sigmas"
            )
        if np.any(w < 0.0) or not np.all(np.isfinite(w)):
            raise GuidingError("Mixture weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise GuidingError(f"Mixture weights must sum to 1, got {w.sum():.12f}")
        if not np.all(np.isfinite(mu)):
            raise GuidingError("Mixture means must be finite")
        if not (np.all(np.isfinite(s)) and np.all(s > 0.0)):
            raise GuidingError("Mixture sigmas must be positive and finite")
        for a in (w, mu, s):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def from_components(cls, components: Sequence[Tuple[float, Gaussian3]]) -> "GaussianMixture":
        if not components:
            raise GuidingError("A mixture needs at least one component")
        return cls(
            weights=[w for w, _ in components],
            means=[g.mu for _, g in components],
            sigmas=[g.sigma for _, g in components],
        )

    @classmethod
    def uniform(cls, gaussians: Sequence[Gaussian3]) -> "GaussianMixture":
        """Equal-weight mixture of the given components"""
        n = len(gaussians)
        if n == 0:
            raise GuidingError("A mixture needs at least one component")
        return cls.from_components([(1.0 / n, g) for g in gaussians])

    def __len__(self) -> int:
        return int(self.weights.size)

    def component(self, i: int) -> Gaussian3:
        return Gaussian3(self.means[i], float(self.sigmas[i]))

    @property
    def components(self) -> List[Tuple[float, Gaussian3]]:
        return [(float(self.weights[i]), self.component(i)) for i in range(len(self))]


@dataclass(frozen=True, eq=False)
class DirectionalView:
    """
    A mixture seen from observation point x0: per component distance d_i and pole z_i.

    When d_i == 0 the pole is (0, 0, 1); the distribution is uniform there.
    """

    x0: np.ndarray
    d: np.ndarray
    z: np.ndarray
    mixture: GaussianMixture

    @classmethod
    def of(cls, mixture: GaussianMixture, x0: ArrayLike) -> "DirectionalView":
        x0 = _vec3(x0, "x0").reshape(3)
        diff = mixture.means - x0
        d = np.linalg.norm(diff, axis=-1)
        safe = d > 0.0
        z = np.where(safe[:, None], diff / np.where(safe, d, 1.0)[:, None], POLE)
        return cls(x0=x0, d=d, z=z, mixture=mixture)

    def component_pdfs(self, omega: ArrayLike) -> np.ndarray:
        omega = _vec3(omega, "omega")
        cos = np.clip(omega @ self.z.T, -1.0, 1.0)
        return _closed_form(self.d, self.mixture.sigmas, cos)

    def pdf(self, omega: ArrayLike) -> np.ndarray:
        return self.component_pdfs(omega) @ self.mixture.weights


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def eval_gaussian(g: Gaussian3, x: ArrayLike) -> np.ndarray:
    """Unnormalized isotropic Gaussian exp(-|x - mu|^2 / (2 sigma^2)), in (0, 1]"""
    x = _vec3(x, "x")
    r2 = np.sum((x - g.mu) ** 2, axis=-1)
    return np.exp(-r2 / (2.0 * g.sigma * g.sigma))


def mixture_density(m: GaussianMixture, x: ArrayLike) -> np.ndarray:
    """Normalized mixture density at x (units length^-3)"""
    x = _vec3(x, "x")
    r2 = np.sum((x[..., None, :] - m.means) ** 2, axis=-1)
    s2 = m.sigmas * m.sigmas
    norm = (2.0 * math.pi * s2) ** -1.5
    return np.sum(m.weights * norm * np.exp(-r2 / (2.0 * s2)), axis=-1)


def erf_approx(t: ArrayLike) -> np.ndarray:
    """Abramowitz & Stegun 7.1.26, extended to negative arguments by oddness"""
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t)
    return np.sign(t) * (1.0 - _erfcx_approx(a) * np.exp(-a * a))


def _erfcx_approx(a: np.ndarray) -> np.ndarray:
    """exp(a^2) * erfc(a) for a >= 0 from the same 7.1.26 polynomial"""
    tau = 1.0 / (1.0 + _AS_P * a)
    a1, a2, a3, a4, a5 = _AS_A
    return tau * (a1 + tau * (a2 + tau * (a3 + tau * (a4 + tau * a5))))


def _closed_form(d: np.ndarray, sigma: np.ndarray, cos: np.ndarray) -> np.ndarray:
    """
    Normalized directional density F_o for distance d, width sigma and cos(theta).

    With k = d/sigma and u = k*cos the unnormalized closed form divided by sigma^3 is
        u*exp(-k^2/2) + sqrt(pi/2)*(1+u^2)*exp(-k^2 sin^2/2)*(1+erf(u/sqrt2)).
    For u < 0, 1+erf(u/sqrt2) = erfcx(-u/sqrt2)*exp(-u^2/2), which keeps both exp
    factors separate and avoids cancellation in the tail.
    """
    d, sigma, cos = np.broadcast_arrays(
        np.asarray(d, dtype=np.float64),
        np.asarray(sigma, dtype=np.float64),
        np.clip(np.asarray(cos, dtype=np.float64), -1.0, 1.0),
    )
    k = d / sigma
    u = k * cos
    sin2 = np.maximum(1.0 - cos * cos, 0.0)
    out = np.empty(u.shape, dtype=np.float64)
    approx = _erf_backend is ErfBackend.APPROX

    pos = u >= 0.0
    if np.any(pos):
        up, kp = u[pos], k[pos]
        erf_term = 1.0 + (erf_approx(up * INV_SQRT2) if approx else special.erf(up * INV_SQRT2))
        out[pos] = (
            up * np.exp(-0.5 * kp * kp)
            + SQRT_HALF_PI * (1.0 + up * up) * np.exp(-0.5 * kp * kp * sin2[pos]) * erf_term
        )
    neg = ~pos
    if np.any(neg):
        un, kn = u[neg], k[neg]
        a = -un * INV_SQRT2
        scaled = _erfcx_approx(a) if approx else special.erfcx(a)
        bracket = un + SQRT_HALF_PI * (1.0 + un * un) * scaled
        out[neg] = np.exp(-0.5 * kn * kn) * np.maximum(bracket, 0.0)
    return out / NORM_3D


def directional_pdf_component(g: Gaussian3, x0: ArrayLike, omega: ArrayLike) -> np.ndarray:
    """Solid-angle density (sr^-1) of directions from x0 toward points drawn from g"""
    x0 = _vec3(x0, "x0")
    omega = _vec3(omega, "omega")
    diff = g.mu - x0
    d = np.linalg.norm(diff, axis=-1)
    safe = d > 0.0
    z = np.where(safe[..., None], diff / np.where(safe, d, 1.0)[..., None], POLE)
    cos = np.sum(omega * z, axis=-1)
    return _closed_form(d, g.sigma, cos)


def component_directional_pdfs(m: GaussianMixture, x0: ArrayLike, omega: ArrayLike) -> np.ndarray:
    """Per-component directional densities, shape (..., N)"""
    x0 = _vec3(x0, "x0")
    omega = _vec3(omega, "omega")
    diff = m.means - x0[..., None, :]
    d = np.linalg.norm(diff, axis=-1)
    safe = d > 0.0
    z = np.where(safe[..., None], diff / np.where(safe, d, 1.0)[..., None], POLE)
    cos = np.sum(omega[..., None, :] * z, axis=-1)
    return _closed_form(d, m.sigmas, cos)


def directional_pdf_mixture(m: GaussianMixture, x0: ArrayLike, omega: ArrayLike) -> np.ndarray:
    """Weighted sum of the component directional densities"""
    return component_directional_pdfs(m, x0, omega) @ m.weights


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_point(g: Gaussian3, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    """Point(s) from the normalized Gaussian"""
    shape = (3,) if n is None else (n, 3)
    return g.mu + g.sigma * rng.standard_normal(shape)


def _directions_to(points: np.ndarray, x0: np.ndarray, redraw) -> np.ndarray:
    v = points - x0
    norm = np.linalg.norm(v, axis=-1)
    bad = norm == 0.0
    # x == x0 has probability zero; redraw until it does not happen
    while np.any(bad):
        v[bad] = redraw(bad) - (x0[bad] if x0.ndim > 1 else x0)
        norm = np.linalg.norm(v, axis=-1)
        bad = norm == 0.0
    return v / norm[..., None]


def sample_direction(
    g: Gaussian3, x0: ArrayLike, rng: np.random.Generator, n: Optional[int] = None
) -> np.ndarray:
    """Unit direction(s) from x0 toward points drawn from g"""
    x0 = _vec3(x0, "x0")
    if n is None and x0.ndim == 1:
        pts = sample_point(g, rng)[None, :]
        return _directions_to(pts, x0, lambda bad: sample_point(g, rng, int(bad.sum())))[0]
    count = n if n is not None else x0.shape[0]
    pts = sample_point(g, rng, count)
    return _directions_to(pts, np.broadcast_to(x0, pts.shape).copy(), lambda bad: sample_point(g, rng, int(bad.sum())))


def choose_components(weights: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
    """Component indices drawn proportionally to weights"""
    cdf = np.cumsum(weights)
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    return np.minimum(idx, weights.size - 1)


def sample_points_mixture(m: GaussianMixture, rng: np.random.Generator, n: int) -> np.ndarray:
    idx = choose_components(m.weights, rng, n)
    return m.means[idx] + m.sigmas[idx, None] * rng.standard_normal((n, 3))


def sample_direction_mixture(
    m: GaussianMixture, x0: ArrayLike, rng: np.random.Generator, n: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Direction(s) from x0 and the mixture's directional pdf at them.

    A component is selected by weight, a point is drawn from it and the direction
    toward that point is returned. The pdf comes from directional_pdf_mixture.
    """
    x0 = _vec3(x0, "x0")
    single = n is None and x0.ndim == 1
    count = 1 if single else (n if n is not None else x0.shape[0])
    idx = choose_components(m.weights, rng, count)
    pts = m.means[idx] + m.sigmas[idx, None] * rng.standard_normal((count, 3))

    def redraw(bad):
        j = idx[bad]
        return m.means[j] + m.sigmas[j, None] * rng.standard_normal((j.size, 3))

    origins = np.broadcast_to(x0, pts.shape).copy()
    dirs = _directions_to(pts, origins, redraw)
    pdf = directional_pdf_mixture(m, origins, dirs)
    if single:
        return dirs[0], pdf[0]
    return dirs, pdf


# ---------------------------------------------------------------------------
# Plane projection (infinite lights)
# ---------------------------------------------------------------------------


def orthonormal_basis(n: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Two tangents completing unit normal(s) n to a right-handed frame (branchless ONB)"""
    n = np.asarray(n, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(z >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + z)
    b = x * y * a
    t = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    bt = np.stack([b, sign + y * y * a, -y], axis=-1)
    return t, bt


@dataclass(frozen=True, eq=False)
class PlaneFrame:
    origin: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    bitangent: np.ndarray

    @classmethod
    def through(cls, origin: ArrayLike, normal: ArrayLike) -> "PlaneFrame":
        o = _vec3(origin, "plane_origin").reshape(3)
        nrm = _vec3(normal, "plane_normal").reshape(3)
        if abs(np.linalg.norm(nrm) - 1.0) > 1e-6:
            raise GuidingError("Plane normal must be a unit vector")
        t, b = orthonormal_basis(nrm)
        return cls(origin=o, normal=nrm, tangent=t, bitangent=b)

    def to_plane(self, x: ArrayLike) -> np.ndarray:
        """In-plane coordinates of the orthogonal projection of x"""
        rel = _vec3(x, "x") - self.origin
        return np.stack([rel @ self.tangent, rel @ self.bitangent], axis=-1)

    def to_world(self, p2: ArrayLike) -> np.ndarray:
        p2 = np.asarray(p2, dtype=np.float64)
        return self.origin + p2[..., :1] * self.tangent + p2[..., 1:2] * self.bitangent


@dataclass(frozen=True, eq=False)
class ProjectedMixture:
    """2D Gaussian mixture on a plane, the orthogonal projection of a 3D mixture"""

    frame: PlaneFrame
    weights: np.ndarray
    means2: np.ndarray
    sigmas: np.ndarray

    def __len__(self) -> int:
        return int(self.weights.size)

    def __iter__(self) -> Iterator[Tuple[float, Gaussian2]]:
        return iter(self.components)

    @property
    def components(self) -> List[Tuple[float, Gaussian2]]:
        return [
            (float(w), Gaussian2(mu, float(s)))
            for w, mu, s in zip(self.weights, self.means2, self.sigmas)
        ]


def project_mixture_to_plane(
    m: GaussianMixture, plane_origin: ArrayLike, plane_normal: ArrayLike
) -> ProjectedMixture:
    """Each isotropic component projects to an isotropic 2D Gaussian with the same sigma"""
    frame = PlaneFrame.through(plane_origin, plane_normal)
    return ProjectedMixture(
        frame=frame,
        weights=m.weights,
        means2=frame.to_plane(m.means),
        sigmas=m.sigmas,
    )


def plane_pdf(pm: ProjectedMixture, p2: ArrayLike) -> np.ndarray:
    """Per-area density of the projected mixture (units length^-2)"""
    p2 = np.asarray(p2, dtype=np.float64)
    r2 = np.sum((p2[..., None, :] - pm.means2) ** 2, axis=-1)
    s2 = pm.sigmas * pm.sigmas
    return np.sum(pm.weights * np.exp(-r2 / (2.0 * s2)) / (2.0 * math.pi * s2), axis=-1)


def sample_plane_point(
    pm: ProjectedMixture, rng: np.random.Generator, n: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """2D point(s) from the projected mixture and their per-area pdf"""
    count = 1 if n is None else n
    idx = choose_components(pm.weights, rng, count)
    pts = pm.means2[idx] + pm.sigmas[idx, None] * rng.standard_normal((count, 2))
    pdf = plane_pdf(pm, pts)
    if n is None:
        return pts[0], pdf[0]
    return pts, pdf


# ---------------------------------------------------------------------------
# Uniform emission helpers
# ---------------------------------------------------------------------------


def uniform_sphere(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Map uniform numbers to uniformly distributed unit directions"""
    z = 1.0 - 2.0 * u1
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * u2
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def cosine_hemisphere(u1: np.ndarray, u2: np.ndarray, normal: ArrayLike) -> np.ndarray:
    """Cosine-distributed directions about `normal` (pdf cos/pi)"""
    normal = np.asarray(normal, dtype=np.float64)
    r = np.sqrt(u1)
    phi = 2.0 * math.pi * u2
    lx, ly = r * np.cos(phi), r * np.sin(phi)
    lz = np.sqrt(np.maximum(0.0, 1.0 - u1))
    t, b = orthonormal_basis(normal)
    return lx[..., None] * t + ly[..., None] * b + lz[..., None] * normal
