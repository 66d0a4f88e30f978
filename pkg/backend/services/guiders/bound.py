"""
Bound-based guider
Caster bounding boxes as a spatial distribution: pick a box by weight, a point
uniformly in it, and emit toward that point.
"""

from typing import Dict, Optional

import numpy as np

from services.emission import EmissionGuide
from services.error_handler import get_logger
from services.gmath import choose_components
from services.guiders.base_guider import BaseGuider, RenderContext
from services.guiders.models import BoundGuide, GuiderKind

logger = get_logger(__name__)

SMOOTHING = 0.5
BOX_PAD = 1e-3


def ray_box_interval(lo: np.ndarray, hi: np.ndarray, x0: np.ndarray, omega: np.ndarray):
    """
    Entry/exit distances of rays x0 + r * omega (n rays) against boxes (b boxes).
    Returns (r_entry, r_exit) of shape (n, b), with r_entry clamped at 0;
    r_exit <= r_entry where the ray misses.
    """
    x0 = x0[:, None, :]
    om = omega[:, None, :]
    nonzero = om != 0.0
    safe = np.where(nonzero, om, 1.0)
    t1 = (lo[None] - x0) / safe
    t2 = (hi[None] - x0) / safe
    inside = (x0 >= lo[None]) & (x0 <= hi[None])
    near = np.where(nonzero, np.minimum(t1, t2), np.where(inside, -np.inf, np.inf))
    far = np.where(nonzero, np.maximum(t1, t2), np.where(inside, np.inf, -np.inf))
    r_entry = np.maximum(near.max(axis=2), 0.0)
    r_exit = far.min(axis=2)
    return r_entry, r_exit


def bound_pdfs(bg: BoundGuide, x0: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Per-box solid-angle densities (r_exit^3 - r_entry^3) / (3 V), shape (n, b)"""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    x0 = np.broadcast_to(x0, omega.shape)
    r_in, r_out = ray_box_interval(bg.lo, bg.hi, x0, omega)
    hit = r_out > r_in
    r_in = np.where(hit, r_in, 0.0)
    r_out = np.where(hit, r_out, 0.0)
    return (r_out**3 - r_in**3) / (3.0 * bg.volume[None, :])


def bound_pdf(bg: BoundGuide, x0: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Weighted sum of the per-box densities"""
    return bound_pdfs(bg, x0, omega) @ bg.weights


def bound_sample(bg: BoundGuide, x0: np.ndarray, rng: np.random.Generator, n: Optional[int] = None):
    """Directions toward uniform points of weight-selected boxes, and their pdf"""
    x0 = np.asarray(x0, dtype=np.float64)
    single = n is None and x0.ndim == 1
    count = 1 if single else (n if n is not None else x0.shape[0])
    origins = np.broadcast_to(x0, (count, 3))
    box = choose_components(bg.weights, rng, count)
    pts = bg.lo[box] + (bg.hi[box] - bg.lo[box]) * rng.random((count, 3))
    v = pts - origins
    norm = np.linalg.norm(v, axis=1)
    v = v / np.where(norm > 0.0, norm, 1.0)[:, None]
    pdf = bound_pdf(bg, origins, v)
    if single:
        return v[0], pdf[0]
    return v, pdf


def bound_weight_update(bg: BoundGuide, counts: np.ndarray, smoothing: float = SMOOTHING) -> None:
    """weights <- smoothing * weights + (1 - smoothing) * normalized(counts + 1)"""
    c = np.asarray(counts, dtype=np.float64) + 1.0
    bg.weights = smoothing * bg.weights + (1.0 - smoothing) * c / c.sum()


def attribute_to_boxes(bg: BoundGuide, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-box totals of weights; a point goes to the first box containing it, else the nearest box centre"""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return np.zeros(len(bg))
    inside = np.all((pts[:, None, :] >= bg.lo[None]) & (pts[:, None, :] <= bg.hi[None]), axis=2)
    centres = 0.5 * (bg.lo + bg.hi)
    nearest = np.argmin(np.sum((pts[:, None, :] - centres[None]) ** 2, axis=2), axis=1)
    box = np.where(inside.any(axis=1), np.argmax(inside, axis=1), nearest)
    return np.bincount(box, weights=weights, minlength=len(bg))


class BoundEmissionGuide(EmissionGuide):
    def __init__(self, bg: BoundGuide):
        self.bg = bg

    def sample_directions(self, x0, rng):
        dirs, _ = bound_sample(self.bg, x0, rng, x0.shape[0])
        return dirs

    def direction_pdf(self, x0, omega):
        return bound_pdf(self.bg, x0, omega)


class BoundGuider(BaseGuider):
    kind = GuiderKind.BOUND

    def __init__(self, config):
        super().__init__(config)
        self.guides: Dict[int, BoundGuide] = {}

    def initialize(self, context: RenderContext, init_result) -> None:
        scene = context.scene
        casters = scene.caster_ids
        if not casters:
            logger.warning("Scene has no casters; bound guider stays uniform")
            return
        pad = BOX_PAD * scene.diameter
        boxes = [scene.surface_aabb(sid) for sid in casters]
        lo = np.array([b[0] for b in boxes])
        hi = np.array([b[1] for b in boxes])
        thin = (hi - lo) < pad
        lo = np.where(thin, lo - pad, lo)
        hi = np.where(thin, hi + pad, hi)
        for lid in range(len(scene.lights)):
            self.guides[lid] = BoundGuide(lo.copy(), hi.copy())
        self.update(context, init_result)

    def guide_for(self, light_id: int) -> Optional[BoundEmissionGuide]:
        bg = self.guides.get(light_id)
        return None if bg is None else BoundEmissionGuide(bg)

    def update(self, context: RenderContext, result) -> None:
        for lid, bg in self.guides.items():
            batch = result.training.get(lid)
            if batch is None or len(batch) == 0:
                continue
            counts = attribute_to_boxes(bg, batch.x, batch.t_count.astype(np.float64))
            bound_weight_update(bg, counts)
