"""
Visibility-driven MCMC guider
Replica chains in primary sample space: uniform (large-step) proposals mixed with
small wrapped Gaussian mutations, accepted only when the photon path lands near a
camera-visible receiver point. Each recorded photon carries the running visible
fraction as a flux scale, which keeps the estimator unbiased.
"""

import math
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from services.emission import EmissionBatch, emit_guided
from services.error_handler import GuidingError, get_logger
from services.guiders.base_guider import BaseGuider, RenderContext
from services.guiders.models import GuiderKind, MCMCChains
from services.performance import rng_stream
from services.renderer import trace_photons, visible_receiver_points
from services.scene import Scene

logger = get_logger(__name__)

# light, position (2), direction (2), dielectric decisions (3)
PSS_DIM = 8
STREAM_INIT = 4


def wrap_unit(v: np.ndarray) -> np.ndarray:
    out = np.mod(v, 1.0)
    return np.where(out >= 1.0, 0.0, out)


def primary_emissions(scene: Scene, v: np.ndarray) -> EmissionBatch:
    """Emissions for primary-sample vectors, in row order; light pmf is 1/L"""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n = v.shape[0]
    L = len(scene.lights)
    lid = np.minimum((v[:, 0] * L).astype(np.int64), L - 1)
    out = EmissionBatch(
        light_id=lid, x0=np.zeros((n, 3)), omega=np.zeros((n, 3)), pdf=np.zeros(n),
        dir_pdf=np.zeros(n), flux=np.zeros((n, 3)), pmf=np.full(n, 1.0 / L), lobe_u=v[:, 5:8].copy(),
    )
    for idx, light in enumerate(scene.lights):
        sel = np.flatnonzero(lid == idx)
        if sel.size == 0:
            continue
        part = emit_guided(light, None, 0.0, scene, None, sel.size, light_id=idx, primary=v[sel, 1:5])
        out.x0[sel] = part.x0
        out.omega[sel] = part.omega
        out.pdf[sel] = part.pdf
        out.dir_pdf[sel] = part.dir_pdf
        out.flux[sel] = part.flux
    return out


class VisibilityTarget:
    """F(v) = 1 when the photon path of v deposits within max_radius of a camera-visible receiver point"""

    def __init__(self, scene: Scene, max_radius: float, max_depth: int):
        self.scene = scene
        self.max_radius = max_radius
        self.max_depth = max_depth
        pts = visible_receiver_points(scene, max_depth)
        self.tree = cKDTree(pts, balanced_tree=True, compact_nodes=True) if len(pts) else None
        logger.info(f"Visibility target: {len(pts)} visible receiver points")

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        out = np.zeros(v.shape[0], dtype=bool)
        if self.tree is None or v.shape[0] == 0:
            return out
        batch = primary_emissions(self.scene, v)
        tr = trace_photons(self.scene, batch, self.max_depth, lobe_u=batch.lobe_u)
        if tr.emission.size:
            dist, _ = self.tree.query(tr.position, k=1, distance_upper_bound=self.max_radius)
            out[tr.emission] = np.isfinite(dist) & (tr.flux.max(axis=1) > 0.0)
        return out


def bootstrap(chains: MCMCChains, target, M: int, rng: np.random.Generator) -> int:
    """
    M uniform proposals; visible ones seed the chains (drawn with replacement).
    The proposals also count toward the visible fraction. Returns the visible count.
    """
    C, dim = chains.state.shape
    v = rng.random((M, dim))
    f = target(v)
    hits = int(np.count_nonzero(f))
    chains.visible += hits
    chains.proposals += M
    if hits:
        pool = v[f]
        chains.state = pool[rng.integers(0, hits, size=C)].copy()
        chains.seeded[:] = True
    else:
        logger.warning(f"MCMC bootstrap: none of {M} proposals reached a visible point")
    return hits


def mcmc_propose(chains: MCMCChains, target, rng: np.random.Generator, sigma: float = 0.001) -> np.ndarray:
    """
    One step of every chain; returns the (C, dim) states to record.

    A visible uniform proposal is accepted and recorded. Otherwise a seeded chain
    tries a wrapped Gaussian mutation and records its (possibly unchanged) state;
    an unseeded chain records the uniform proposal.
    """
    C, dim = chains.state.shape
    v1 = rng.random((C, dim))
    f1 = target(v1)
    chains.visible += int(np.count_nonzero(f1))
    chains.proposals += C
    record = v1.copy()
    chains.state[f1] = v1[f1]
    chains.seeded |= f1

    mut = np.flatnonzero(~f1 & chains.seeded)
    if mut.size:
        v2 = wrap_unit(chains.state[mut] + sigma * rng.standard_normal((mut.size, dim)))
        f2 = target(v2)
        chains.state[mut[f2]] = v2[f2]
        record[mut] = chains.state[mut]
    return record


class MCMCGuider(BaseGuider):
    kind = GuiderKind.MCMC

    def __init__(self, config):
        super().__init__(config)
        self.chains: Optional[MCMCChains] = None
        self.target: Optional[VisibilityTarget] = None

    def initialize(self, context: RenderContext, init_result) -> None:
        cfg = self.config
        self.target = VisibilityTarget(context.scene, context.max_radius, cfg.max_depth)
        self.chains = MCMCChains.fresh(cfg.mcmc_chains, PSS_DIM)
        rng = rng_stream(cfg.seed, 0, STREAM_INIT)
        M = cfg.mcmc_bootstrap_ratio * cfg.mcmc_chains
        hits = bootstrap(self.chains, self.target, M, rng)
        logger.info(f"MCMC bootstrap: {hits}/{M} visible, b_hat={self.chains.b_hat:.4g}")

    def guide_for(self, light_id: int):
        return None

    def beta(self, iteration: int) -> float:
        return 0.0

    def emit_photons(self, context: RenderContext, n: int, rng: np.random.Generator, iteration: int) -> EmissionBatch:
        if self.chains is None:
            return super().emit_photons(context, n, rng, iteration)
        if n <= 0:
            raise GuidingError("Photon count must be positive")
        steps = math.ceil(n / len(self.chains))
        records = [mcmc_propose(self.chains, self.target, rng, self.config.mcmc_sigma) for _ in range(steps)]
        v = np.concatenate(records)[:n]
        batch = primary_emissions(context.scene, v)
        batch.flux *= self.chains.b_hat
        return batch

    def describe(self) -> dict:
        b_hat = self.chains.b_hat if self.chains is not None else None
        return {"kind": self.kind.value, "chains": self.config.mcmc_chains, "b_hat": b_hat}
