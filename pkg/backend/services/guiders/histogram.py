"""
Directional histogram guider
Per light, an equal-solid-angle histogram over (cos theta, phi) in a light-local
frame, accumulated over all iterations.
"""

import math
from typing import Dict, Optional

import numpy as np

from services.emission import EmissionGuide
from services.error_handler import get_logger
from services.gmath import orthonormal_basis
from services.guiders.base_guider import BaseGuider, RenderContext
from services.guiders.models import GuiderKind, Histogram2D
from services.scene import DirectionalLight, Light, PointLight

logger = get_logger(__name__)

PRIOR = 1e-3


def histogram_for_light(light: Light, res: int) -> Histogram2D:
    """World axes for point lights, the emitting-side normal frame for rect lights"""
    if isinstance(light, PointLight):
        return Histogram2D(light.position, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]),
                           np.array([0.0, 0.0, 1.0]), res)
    t, b = orthonormal_basis(light.normal)
    return Histogram2D(light.center, t, b, light.normal, res)


def _cells(h: Histogram2D, omega: np.ndarray):
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    x = omega @ h.tangent
    y = omega @ h.bitangent
    cos = np.clip(omega @ h.normal, -1.0, 1.0)
    phi = np.mod(np.arctan2(y, x), 2.0 * math.pi)
    i = np.minimum(((cos + 1.0) * 0.5 * h.res).astype(np.int64), h.res - 1)
    j = np.minimum((phi / (2.0 * math.pi) * h.res).astype(np.int64), h.res - 1)
    return i, j


def h2d_record(h: Histogram2D, omega: np.ndarray, weight) -> None:
    i, j = _cells(h, omega)
    np.add.at(h.weights, (i, j), np.broadcast_to(np.asarray(weight, dtype=np.float64), i.shape))


def h2d_probabilities(h: Histogram2D) -> np.ndarray:
    """Cell probabilities with a small uniform prior; uniform for an empty histogram"""
    w = h.weights
    total = w.sum()
    if total <= 0.0:
        return np.full(w.shape, 1.0 / w.size)
    p = w + PRIOR * total / w.size
    return p / p.sum()


def h2d_pdf(h: Histogram2D, omega: np.ndarray, probs: Optional[np.ndarray] = None) -> np.ndarray:
    """Solid-angle density: cell probability over cell solid angle"""
    probs = h2d_probabilities(h) if probs is None else probs
    i, j = _cells(h, omega)
    return probs[i, j] / h.cell_solid_angle


def h2d_sample(h: Histogram2D, rng: np.random.Generator, n: int, probs: Optional[np.ndarray] = None):
    """Cell by probability, then uniform inside the cell; returns (directions, pdf)"""
    probs = h2d_probabilities(h) if probs is None else probs
    cdf = np.cumsum(probs.ravel())
    flat = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), cdf.size - 1)
    i, j = np.divmod(flat, h.res)
    jit = rng.random((n, 2))
    cos = np.clip(-1.0 + 2.0 * (i + jit[:, 0]) / h.res, -1.0, 1.0)
    phi = 2.0 * math.pi * (j + jit[:, 1]) / h.res
    sin = np.sqrt(np.maximum(0.0, 1.0 - cos * cos))
    dirs = (
        (sin * np.cos(phi))[:, None] * h.tangent
        + (sin * np.sin(phi))[:, None] * h.bitangent
        + cos[:, None] * h.normal
    )
    return dirs, probs[i, j] / h.cell_solid_angle


class HistogramGuide(EmissionGuide):
    def __init__(self, h: Histogram2D):
        self.h = h
        self.probs = h2d_probabilities(h)

    def sample_directions(self, x0, rng):
        dirs, _ = h2d_sample(self.h, rng, x0.shape[0], self.probs)
        return dirs

    def direction_pdf(self, x0, omega):
        return h2d_pdf(self.h, omega, self.probs)


class H2DGuider(BaseGuider):
    kind = GuiderKind.H2D

    def __init__(self, config):
        super().__init__(config)
        self.histograms: Dict[int, Histogram2D] = {}
        self._guides: Dict[int, HistogramGuide] = {}

    def initialize(self, context: RenderContext, init_result) -> None:
        for lid, light in enumerate(context.scene.lights):
            if isinstance(light, DirectionalLight):
                continue
            self.histograms[lid] = histogram_for_light(light, self.config.h2d_resolution)
        self.update(context, init_result)

    def guide_for(self, light_id: int) -> Optional[HistogramGuide]:
        if light_id not in self.histograms:
            return None
        if light_id not in self._guides:
            self._guides[light_id] = HistogramGuide(self.histograms[light_id])
        return self._guides[light_id]

    def update(self, context: RenderContext, result) -> None:
        for lid, h in self.histograms.items():
            batch = result.training.get(lid)
            if batch is None or len(batch) == 0:
                continue
            m = (batch.t_count > 0) & (batch.dir_pdf > 0.0)
            if not np.any(m):
                continue
            h2d_record(h, batch.directions[m], batch.t_count[m] / batch.dir_pdf[m])
            self._guides.pop(lid, None)
