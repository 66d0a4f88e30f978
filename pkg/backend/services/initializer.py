"""
Mixture initializer
Seed Gaussians from k-means over caster surfaces, ranked per light by the
first-bounce points of the photons gathered in the uniform first pass.
Also the naive (k-means over first-bounce points) and off (random) variants.
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence

import numpy as np

from services.error_handler import GuidingError, get_logger
from services.gmath import Gaussian3, GaussianMixture
from services.guiding_optimizer import C_S
from services.scene import Scene

if TYPE_CHECKING:
    from services.config import RenderConfig
    from services.renderer import IterationResult

logger = get_logger(__name__)

SIGMA_FLOOR = 1e-4


@dataclass
class SurfaceSampleSet:
    """Points on caster surfaces with their area weights"""

    points: np.ndarray
    weights: np.ndarray
    surface: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.points.shape[0] == 0:
            raise GuidingError("Surface sample set is empty")
        if self.weights.shape[0] != self.points.shape[0] or np.any(self.weights <= 0.0):
            raise GuidingError("Surface sample weights must be positive, one per point")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class SeedGaussianSet:
    """Candidate Gaussians with one vote counter each"""

    means: np.ndarray
    sigmas: np.ndarray
    counters: np.ndarray = field(default=None)
    surface: Optional[np.ndarray] = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if self.counters is None:
            self.counters = np.zeros(self.means.shape[0], dtype=np.int64)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def gaussians(self) -> List[Gaussian3]:
        return [Gaussian3(m, float(s)) for m, s in zip(self.means, self.sigmas)]

    def clear_counter(self) -> None:
        self.counters = np.zeros(len(self), dtype=np.int64)


def sample_geometry(scene: Scene, casters: Sequence[int], n: int, rng: np.random.Generator) -> SurfaceSampleSet:
    """n points over the given caster surfaces, selected proportionally to surface area"""
    casters = list(casters)
    if not casters:
        raise GuidingError("No caster surfaces to sample")
    areas = np.array([scene.surface_area(s) for s in casters])
    total = areas.sum()
    counts = rng.multinomial(n, areas / total)
    pts, sids = [], []
    for sid, c in zip(casters, counts):
        if c:
            pts.append(scene.sample_surface(sid, int(c), rng))
            sids.append(np.full(int(c), sid))
    return SurfaceSampleSet(
        points=np.concatenate(pts),
        weights=np.full(n, total / n),
        surface=np.concatenate(sids),
    )


def assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per point; ties go to the lowest index"""
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)


def kmeans(
    points: np.ndarray,
    K: int,
    max_iters: int,
    rng: np.random.Generator,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Weighted Lloyd iterations with k-means++ seeding.

    Stops when assignments no longer change or after max_iters; an empty cluster is
    reseeded at the point farthest from its centroid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if K < 1 or K > n:
        raise GuidingError(f"k-means needs 1 <= K <= {n} points, got K={K}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n)

    centroids = np.empty((K, 3))
    centroids[0] = pts[rng.choice(n, p=w / w.sum())]
    d2 = np.sum((pts - centroids[0]) ** 2, axis=1)
    for k in range(1, K):
        score = w * d2
        if score.sum() <= 0.0:
            idx = rng.choice(n, p=w / w.sum())
        else:
            idx = rng.choice(n, p=score / score.sum())
        centroids[k] = pts[idx]
        d2 = np.minimum(d2, np.sum((pts - centroids[k]) ** 2, axis=1))

    labels = None
    for _ in range(max_iters):
        new_labels = assign(pts, centroids)
        for k in range(K):
            if not np.any(new_labels == k):
                dist = np.sum((pts - centroids[new_labels]) ** 2, axis=1)
                far = int(np.argmax(dist))
                new_labels[far] = k
                centroids[k] = pts[far]
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        wsum = np.bincount(labels, weights=w, minlength=K)
        owned = wsum > 0.0
        for j in range(3):
            sums = np.bincount(labels, weights=w * pts[:, j], minlength=K)
            centroids[owned, j] = sums[owned] / wsum[owned]
    return centroids


def build_seed_set(
    scene: Scene,
    K_per_geometry: int,
    n_samples: int,
    rng: np.random.Generator,
    max_iters: int = 32,
) -> SeedGaussianSet:
    """
    K_per_geometry Gaussians per caster: k-means centroids as means, the RMS
    distance to the cluster's points as sigma (floored at 1e-4 * bounding diameter).
    """
    casters = scene.caster_ids
    if not casters:
        raise GuidingError("Scene has no casters")
    floor = SIGMA_FLOOR * scene.diameter
    means, sigmas, sids = [], [], []
    for sid in casters:
        samples = sample_geometry(scene, [sid], n_samples, rng)
        K = min(K_per_geometry, len(samples))
        centroids = kmeans(samples.points, K, max_iters, rng, samples.weights)
        labels = assign(samples.points, centroids)
        d2 = np.sum((samples.points - centroids[labels]) ** 2, axis=1)
        rms = np.sqrt(np.bincount(labels, weights=d2, minlength=K) / np.maximum(np.bincount(labels, minlength=K), 1))
        means.append(centroids)
        sigmas.append(np.maximum(rms, floor))
        sids.append(np.full(K, sid))
    seed = SeedGaussianSet(np.concatenate(means), np.concatenate(sigmas), surface=np.concatenate(sids))
    logger.info(f"Seed set: {len(seed)} Gaussians over {len(casters)} casters")
    return seed


def vote(seed: SeedGaussianSet, points: np.ndarray) -> np.ndarray:
    """Per-Gaussian vote counts of the points (nearest mean wins)"""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return np.zeros(len(seed), dtype=np.int64)
    return np.bincount(assign(pts, seed.means), minlength=len(seed)).astype(np.int64)


def rank(counters: np.ndarray) -> np.ndarray:
    """Indices by decreasing counter, ties to the lowest index"""
    return np.argsort(-np.asarray(counters), kind="stable")


def voted(counters: np.ndarray) -> np.ndarray:
    """Ranked indices with a nonzero counter"""
    order = rank(counters)
    return order[np.asarray(counters)[order] > 0]


def assign_and_rank(seed: SeedGaussianSet, first_bounce_points: np.ndarray, G: int) -> List[Gaussian3]:
    """
    Increments the counter of the nearest Gaussian for every point and returns the
    top-G Gaussians with nonzero counters.
    """
    if len(seed) == 0:
        raise GuidingError("Seed set is empty")
    seed.counters = seed.counters + vote(seed, first_bounce_points)
    order = voted(seed.counters)[:G]
    return [Gaussian3(seed.means[i], float(seed.sigmas[i])) for i in order]


def _mixture_from_ranking(seed: SeedGaussianSet, order: np.ndarray, G: int) -> GaussianMixture:
    """
    The first min(G, len(order)) components in rank order with equal weights.

    Fewer than G voted Gaussians give a smaller mixture.
    """
    picks = np.asarray(order)[:G]
    if picks.size == 0:
        raise GuidingError("No ranked Gaussians to build a mixture from")
    return GaussianMixture(np.full(picks.size, 1.0 / picks.size), seed.means[picks], seed.sigmas[picks])


def gathered_first_bounces(result: "IterationResult", light_id: int) -> np.ndarray:
    """First-bounce points of the photons of one light that were gathered at least once"""
    pm = result.photon_map
    m = (pm.light_id == light_id) & (pm.gather_count > 0)
    return pm.first_bounce[m]


def mixtures_from_pass(
    scene: Scene,
    seed: SeedGaussianSet,
    result: "IterationResult",
    G: int,
    rng: np.random.Generator,
) -> Dict[int, GaussianMixture]:
    """
    Per light: top-G seed Gaussians by that light's votes, uniform weights.
    Lights without votes use the pooled ranking; with no votes at all,
    G Gaussians are drawn uniformly from the seed set.
    """
    votes = {lid: vote(seed, gathered_first_bounces(result, lid)) for lid in range(len(scene.lights))}
    pooled = np.sum(list(votes.values()), axis=0)
    seed.counters = pooled.copy()
    out: Dict[int, GaussianMixture] = {}
    for lid, v in votes.items():
        if v.sum() > 0:
            out[lid] = _mixture_from_ranking(seed, voted(v), G)
        elif pooled.sum() > 0:
            logger.info(f"Light {lid} gathered nothing in the first pass; using pooled ranking")
            out[lid] = _mixture_from_ranking(seed, voted(pooled), G)
        else:
            logger.warning(f"Light {lid}: no photons gathered by any light; seeding uniformly")
            picks = rng.choice(len(seed), size=min(G, len(seed)), replace=False)
            out[lid] = _mixture_from_ranking(seed, picks, G)
    return out


def init_light_mixtures(
    scene: Scene,
    lights: Sequence[int],
    K: int,
    G: int,
    P: int,
    rng: np.random.Generator,
    config: Optional["RenderConfig"] = None,
    init_result: Optional["IterationResult"] = None,
) -> Dict[int, GaussianMixture]:
    """
    Geometry-based initialization for the given lights.

    Runs a P-photon uniform pass unless init_result is supplied.
    """
    if P <= 0:
        raise GuidingError("Initialization photon budget must be positive")
    if init_result is None:
        from services.config import RenderConfig
        from services.renderer import uniform_pass

        cfg = config or RenderConfig()
        init_result = uniform_pass(scene, cfg, P)
    samples = config.geometry_samples if config is not None else 4096
    iters = config.kmeans_iters if config is not None else 32
    seed = build_seed_set(scene, K, samples, rng, iters)
    mixtures = mixtures_from_pass(scene, seed, init_result, G, rng)
    return {lid: mixtures[lid] for lid in lights}


def median_sigma(B: float) -> float:
    """World-space sigma at the midpoint of the sigmoid encoding"""
    return 0.5 * C_S / B


def naive_mixtures(
    scene: Scene, result: "IterationResult", G: int, B: float, rng: np.random.Generator, max_iters: int = 32
) -> Dict[int, GaussianMixture]:
    """k-means over each light's first-bounce points of the first pass, median sigma"""
    out: Dict[int, GaussianMixture] = {}
    sigma = median_sigma(B)
    for lid in range(len(scene.lights)):
        batch = result.training.get(lid)
        pts = batch.x if batch is not None else np.zeros((0, 3))
        if pts.shape[0] == 0:
            logger.warning(f"Light {lid}: no first-bounce points for naive init; placing components randomly")
            out[lid] = random_mixture(scene, G, B, rng)
            continue
        K = min(G, pts.shape[0])
        centroids = kmeans(pts, K, max_iters, rng)
        means = np.resize(centroids, (G, 3))
        out[lid] = GaussianMixture(np.full(G, 1.0 / G), means, np.full(G, sigma))
    return out


def random_mixture(scene: Scene, G: int, B: float, rng: np.random.Generator) -> GaussianMixture:
    """G components at uniform random points inside the bounding sphere, median sigma"""
    v = rng.standard_normal((G, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = scene.radius * rng.random(G) ** (1.0 / 3.0)
    means = scene.center + v * r[:, None]
    return GaussianMixture(np.full(G, 1.0 / G), means, np.full(G, median_sigma(B)))
