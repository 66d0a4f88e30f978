"""
Photon emission
Per-light-type emission with an optional guide blended against uniform emission
by the selection probability beta.

Measures: the pdf of a point or rect light is solid-angle density times the
positional density (delta for point lights, 1/area for rect lights); the pdf of
a directional light is a per-area density on the plane through the scene centre
perpendicular to the light. `flux` is the emitted quantity in that measure
(intensity, radiance x cos, irradiance), so a deposited photon carries
flux / (pdf * light pmf).
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from services.error_handler import GuidingError
from services.gmath import (
    INV_4PI,
    GaussianMixture,
    PlaneFrame,
    cosine_hemisphere,
    directional_pdf_mixture,
    plane_pdf,
    project_mixture_to_plane,
    sample_direction_mixture,
    sample_plane_point,
    uniform_sphere,
)
from services.scene import DirectionalLight, Light, PointLight, RectLight, Scene


class EmissionGuide(ABC):
    """Directional (and optionally planar) emission distribution for one light"""

    handles_infinite: bool = False

    @abstractmethod
    def sample_directions(self, x0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One direction per row of x0 (n, 3)"""

    @abstractmethod
    def direction_pdf(self, x0: np.ndarray, omega: np.ndarray) -> np.ndarray:
        """Solid-angle density at omega for emission points x0"""

    def sample_plane(self, frame: PlaneFrame, rng: np.random.Generator, n: int) -> np.ndarray:
        raise GuidingError(f"{type(self).__name__} cannot guide infinite lights")

    def plane_pdf(self, frame: PlaneFrame, p2: np.ndarray) -> np.ndarray:
        raise GuidingError(f"{type(self).__name__} cannot guide infinite lights")


class MixtureGuide(EmissionGuide):
    """Guide backed by a spatial Gaussian mixture (directional transform / plane projection)"""

    handles_infinite = True

    def __init__(self, mixture: GaussianMixture):
        self.mixture = mixture

    def sample_directions(self, x0, rng):
        dirs, _ = sample_direction_mixture(self.mixture, x0, rng)
        return dirs

    def direction_pdf(self, x0, omega):
        return directional_pdf_mixture(self.mixture, x0, omega)

    def sample_plane(self, frame, rng, n):
        pm = project_mixture_to_plane(self.mixture, frame.origin, frame.normal)
        pts, _ = sample_plane_point(pm, rng, n)
        return pts

    def plane_pdf(self, frame, p2):
        pm = project_mixture_to_plane(self.mixture, frame.origin, frame.normal)
        return plane_pdf(pm, p2)


@dataclass
class EmissionSample:
    x0: np.ndarray
    omega: np.ndarray
    pdf: float
    flux: np.ndarray


@dataclass
class EmissionBatch:
    """
    Struct-of-arrays emission records.

    pdf: joint emission density in the light's measure
    dir_pdf: directional part of pdf (0 for directional lights)
    pmf: probability of having picked the light
    lobe_u: optional (n, 3) numbers fixing the dielectric decisions of each path
    """

    light_id: np.ndarray
    x0: np.ndarray
    omega: np.ndarray
    pdf: np.ndarray
    dir_pdf: np.ndarray
    flux: np.ndarray
    pmf: np.ndarray
    lobe_u: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.light_id.size)

    @property
    def q_hat(self) -> np.ndarray:
        return self.pdf * self.pmf

    @property
    def power(self) -> np.ndarray:
        """Photon power flux / (pdf * pmf); zero where the flux is zero"""
        q = self.q_hat
        return np.where(q[:, None] > 0.0, self.flux / np.where(q > 0.0, q, 1.0)[:, None], 0.0)

    def sample(self, i: int) -> EmissionSample:
        return EmissionSample(self.x0[i], self.omega[i], float(self.pdf[i]), self.flux[i])

    @classmethod
    def empty(cls) -> "EmissionBatch":
        return cls(
            np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)),
            np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros(0),
        )

    @classmethod
    def concat(cls, batches: List["EmissionBatch"]) -> "EmissionBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty()
        out = cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in (
            "light_id", "x0", "omega", "pdf", "dir_pdf", "flux", "pmf")))
        if all(b.lobe_u is not None for b in batches):
            out.lobe_u = np.concatenate([b.lobe_u for b in batches])
        return out

    def take(self, idx: np.ndarray) -> "EmissionBatch":
        return EmissionBatch(self.light_id[idx], self.x0[idx], self.omega[idx], self.pdf[idx],
                             self.dir_pdf[idx], self.flux[idx], self.pmf[idx],
                             None if self.lobe_u is None else self.lobe_u[idx])


def infinite_frame(light: DirectionalLight, scene: Scene) -> PlaneFrame:
    return PlaneFrame.through(scene.center, light.direction)


def effective_beta(guide: Optional[EmissionGuide], beta: float, light: Light) -> float:
    """beta, or 0 when there is no guide able to handle this light"""
    if not 0.0 <= beta <= 1.0:
        raise GuidingError(f"beta must lie in [0, 1], got {beta}")
    if guide is None:
        return 0.0
    if isinstance(light, DirectionalLight) and not guide.handles_infinite:
        return 0.0
    return beta


def emission_pdf(
    light: Light,
    guide: Optional[EmissionGuide],
    beta: float,
    scene: Scene,
    x0: np.ndarray,
    omega: np.ndarray,
) -> np.ndarray:
    """Exact density emit_guided reports for emission (x0, omega)"""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    return _pdfs(light, guide, effective_beta(guide, beta, light), scene, x0, omega)[0]


def _pdfs(light, guide, beta, scene, x0, omega):
    """(joint pdf, directional pdf)"""
    n = x0.shape[0]
    if isinstance(light, DirectionalLight):
        frame = infinite_frame(light, scene)
        p2 = frame.to_plane(x0)
        b = scene.radius
        inside = (np.sum(p2 * p2, axis=-1) <= b * b).astype(np.float64)
        pdf = (1.0 - beta) * inside / (math.pi * b * b)
        if beta > 0.0:
            pdf = pdf + beta * guide.plane_pdf(frame, p2)
        return pdf, np.zeros(n)

    if isinstance(light, PointLight):
        uniform = np.full(n, INV_4PI)
        positional = 1.0
    else:
        cos = omega @ light.normal
        uniform = np.maximum(cos, 0.0) / math.pi
        positional = 1.0 / light.area
    dir_pdf = (1.0 - beta) * uniform
    if beta > 0.0:
        dir_pdf = dir_pdf + beta * guide.direction_pdf(x0, omega)
    return dir_pdf * positional, dir_pdf


def emit_guided(
    light: Light,
    guide: Optional[EmissionGuide],
    beta: float,
    scene: Scene,
    rng: np.random.Generator,
    n: int,
    light_id: int = 0,
    primary: Optional[np.ndarray] = None,
) -> EmissionBatch:
    """
    n emissions from one light.

    The branch and uniform random numbers are always drawn in the same order, so
    beta = 0 consumes the generator exactly like plain uniform emission.
    primary: optional (n, 4) uniform numbers for position and direction (primary
    sample space); the uniform branch is used for every row then.
    """
    beta = effective_beta(guide, beta, light)
    if primary is None:
        branch = rng.random(n)
        pos_u = rng.random((n, 2))
        dir_u = rng.random((n, 2))
    else:
        primary = np.asarray(primary, dtype=np.float64).reshape(n, 4)
        branch = np.ones(n)
        pos_u, dir_u = primary[:, :2], primary[:, 2:4]
        beta = 0.0
    guided = branch < beta
    g_idx = np.flatnonzero(guided)

    if isinstance(light, DirectionalLight):
        frame = infinite_frame(light, scene)
        b = scene.radius
        r = b * np.sqrt(pos_u[:, 0])
        phi = 2.0 * math.pi * pos_u[:, 1]
        p2 = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)
        if g_idx.size:
            p2[g_idx] = guide.sample_plane(frame, rng, g_idx.size)
        omega = np.broadcast_to(light.direction, (n, 3)).copy()
        x0 = frame.to_world(p2) - b * light.direction
        flux = np.broadcast_to(light.radiance, (n, 3)).copy()
    else:
        if isinstance(light, PointLight):
            x0 = np.broadcast_to(light.position, (n, 3)).copy()
            omega = uniform_sphere(dir_u[:, 0], dir_u[:, 1])
        else:
            x0 = light.point_at(pos_u[:, 0], pos_u[:, 1])
            omega = cosine_hemisphere(dir_u[:, 0], dir_u[:, 1], light.normal)
        if g_idx.size:
            omega[g_idx] = guide.sample_directions(x0[g_idx], rng)
        if isinstance(light, PointLight):
            flux = np.broadcast_to(light.intensity, (n, 3)).copy()
        else:
            flux = np.maximum(omega @ light.normal, 0.0)[:, None] * light.radiance

    pdf, dir_pdf = _pdfs(light, guide, beta, scene, x0, omega)
    dead = pdf <= 0.0
    if np.any(dead):
        flux[dead] = 0.0
    return EmissionBatch(
        light_id=np.full(n, light_id, dtype=np.int64),
        x0=x0,
        omega=omega,
        pdf=pdf,
        dir_pdf=dir_pdf,
        flux=flux,
        pmf=np.ones(n),
    )
