"""
Photon renderer
Photon pass (guided emission + specular tracing), KD-tree photon map, camera
pass with adaptive-radius gathering and direct lighting, and the iteration loop
that feeds the guiders and the light sampler.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from services.config import GuiderKind, LightSamplerMode, RenderConfig
from services.emission import EmissionBatch, EmissionSample
from services.error_handler import GuidingError, get_logger
from services.export_service import MetricsRow
from services.gmath import set_erf_backend
from services.guiders.base_guider import BaseGuider, RenderContext
from services.guiding_optimizer import TrainingBatch
from services.image_io import mse, ssim
from services.light_sampler import LightTree, UniformLightSampler
from services.metrics import TimerContext, gauge, increment, record_event
from services.performance import rng_stream, run_chunked, split_chunks
from services.photon_map import Photon, PhotonMap, add_gathers, build_photon_map, gather_batch
from services.scene import DIELECTRIC, DIFFUSE, DirectionalLight, PointLight, Scene

logger = get_logger(__name__)

# rng stream purposes
STREAM_EMIT, STREAM_TRACE, STREAM_CAMERA = 1, 2, 3


# ---------------------------------------------------------------------------
# Specular interactions
# ---------------------------------------------------------------------------


def reflect(d: np.ndarray, n: np.ndarray) -> np.ndarray:
    return d - 2.0 * np.einsum("nj,nj->n", d, n)[:, None] * n


def fresnel_dielectric(cos_i: np.ndarray, eta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unpolarized reflectance and cos of the transmitted angle; eta = n_incident / n_transmitted"""
    sin2_t = eta * eta * np.maximum(0.0, 1.0 - cos_i * cos_i)
    tir = sin2_t >= 1.0
    cos_t = np.sqrt(np.maximum(0.0, 1.0 - sin2_t))
    rs = (eta * cos_i - cos_t) / (eta * cos_i + cos_t)
    rp = (cos_i - eta * cos_t) / (cos_i + eta * cos_t)
    F = np.where(tir, 1.0, 0.5 * (rs * rs + rp * rp))
    return F, cos_t


def scatter_specular(
    scene: Scene, d: np.ndarray, n: np.ndarray, kind: np.ndarray, ior: np.ndarray, u: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    New directions for mirror and dielectric hits.

    The dielectric lobe is picked by Fresnel probability with u; the choice does
    not scale the flux. Returns (directions, is_dielectric).
    """
    out = reflect(d, n)
    diel = kind == DIELECTRIC
    if np.any(diel):
        dd, nn = d[diel], n[diel]
        cos = -np.einsum("nj,nj->n", dd, nn)
        entering = cos > 0.0
        nf = np.where(entering[:, None], nn, -nn)
        cos_i = np.abs(cos)
        eta = np.where(entering, 1.0 / ior[diel], ior[diel])
        F, cos_t = fresnel_dielectric(cos_i, eta)
        refract = u[diel] >= F
        t = eta[:, None] * dd + (eta * cos_i - cos_t)[:, None] * nf
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        out[diel] = np.where(refract[:, None], t, out[diel])
    return out, diel


# ---------------------------------------------------------------------------
# Photon pass
# ---------------------------------------------------------------------------


@dataclass
class TraceResult:
    """
    Per emission: first-bounce point; per deposit: emission index and photon data.
    At most one photon is deposited per emission.
    """

    first_bounce: np.ndarray
    has_first: np.ndarray
    emission: np.ndarray
    position: np.ndarray
    direction: np.ndarray
    normal: np.ndarray
    flux: np.ndarray

    @classmethod
    def merge(cls, parts: List[Tuple[int, "TraceResult"]]) -> "TraceResult":
        return cls(
            first_bounce=np.concatenate([p.first_bounce for _, p in parts]),
            has_first=np.concatenate([p.has_first for _, p in parts]),
            emission=np.concatenate([p.emission + off for off, p in parts]),
            position=np.concatenate([p.position for _, p in parts]),
            direction=np.concatenate([p.direction for _, p in parts]),
            normal=np.concatenate([p.normal for _, p in parts]),
            flux=np.concatenate([p.flux for _, p in parts]),
        )


def trace_photons(
    scene: Scene,
    batch: EmissionBatch,
    max_depth: int,
    rng: Optional[np.random.Generator] = None,
    lobe_u: Optional[np.ndarray] = None,
) -> TraceResult:
    """
    Traces emissions through specular chains.

    A photon is deposited at the first diffuse receiver hit after at least one
    caster hit. Paths die on a miss, a non-caster first hit, a diffuse hit,
    or depth exhaustion. lobe_u: optional (n, 3) numbers for the dielectric
    decisions, decision k uses column min(k, 2).
    """
    n = len(batch)
    o = batch.x0.copy()
    d = batch.omega.copy()
    if rng is None and lobe_u is None:
        raise GuidingError("trace_photons needs an rng or lobe decision numbers")
    power = batch.power
    alive = np.ones(n, dtype=bool)
    casters = np.zeros(n, dtype=np.int64)
    decisions = np.zeros(n, dtype=np.int64)
    first = np.zeros((n, 3))
    has_first = np.zeros(n, dtype=bool)
    deposited = np.zeros(n, dtype=bool)
    dep_pos = np.zeros((n, 3))
    dep_dir = np.zeros((n, 3))
    dep_nrm = np.zeros((n, 3))

    for depth in range(max_depth):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        hits = scene.intersect(o[idx], d[idx])
        if lobe_u is not None:
            u_all = lobe_u[idx, np.minimum(decisions[idx], 2)]
        else:
            u_all = rng.random(idx.size)

        alive[idx[~hits.hit]] = False
        sel = hits.hit
        hi = idx[sel]
        if hi.size == 0:
            continue
        surf = hits.surface[sel]
        p = hits.position[sel]
        nrm = hits.normal[sel]
        u = u_all[sel]
        dir_in = d[hi]

        if depth == 0:
            first[hi] = p
            has_first[hi] = True

        kind = scene.surface_kind(surf)
        caster = scene.is_caster[surf]
        receiver = scene.is_receiver[surf]
        diffuse = kind == DIFFUSE

        dep = diffuse & receiver & (casters[hi] > 0)
        if np.any(dep):
            di = hi[dep]
            deposited[di] = True
            dep_pos[di] = p[dep]
            dep_dir[di] = dir_in[dep]
            facing = np.einsum("nj,nj->n", dir_in[dep], nrm[dep]) < 0.0
            dep_nrm[di] = np.where(facing[:, None], nrm[dep], -nrm[dep])

        stop = diffuse | ((depth == 0) & ~caster)
        alive[hi[stop]] = False
        go = ~stop
        if not np.any(go):
            continue
        gi = hi[go]
        casters[gi] += caster[go].astype(np.int64)
        new_d, diel = scatter_specular(
            scene, dir_in[go], nrm[go], kind[go], scene.ior[scene.surface_material[surf[go]]], u[go]
        )
        decisions[gi[diel]] += 1
        o[gi] = scene.offset(p[go], nrm[go], new_d)
        d[gi] = new_d

    em = np.flatnonzero(deposited)
    return TraceResult(
        first_bounce=first,
        has_first=has_first,
        emission=em,
        position=dep_pos[em],
        direction=dep_dir[em],
        normal=dep_nrm[em],
        flux=power[em],
    )


def trace_photon(scene: Scene, e: EmissionSample, max_depth: int, rng: np.random.Generator, light_id: int = 0) -> List[Photon]:
    """Single-emission convenience wrapper around trace_photons"""
    batch = EmissionBatch(
        light_id=np.array([light_id]),
        x0=np.reshape(e.x0, (1, 3)).astype(np.float64),
        omega=np.reshape(e.omega, (1, 3)).astype(np.float64),
        pdf=np.array([e.pdf], dtype=np.float64),
        dir_pdf=np.array([e.pdf], dtype=np.float64),
        flux=np.reshape(e.flux, (1, 3)).astype(np.float64),
        pmf=np.ones(1),
    )
    tr = trace_photons(scene, batch, max_depth, rng)
    return [
        Photon(tr.position[i], tr.direction[i], tr.flux[i], light_id, tr.first_bounce[0], e.pdf)
        for i in range(tr.emission.size)
    ]


# ---------------------------------------------------------------------------
# Camera pass
# ---------------------------------------------------------------------------


def direct_lighting(
    scene: Scene, p: np.ndarray, n_face: np.ndarray, albedo: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Next-event estimate at diffuse points, one sample per rect light"""
    m = p.shape[0]
    total = np.zeros((m, 3))
    for light in scene.lights:
        if isinstance(light, DirectionalLight):
            wi = np.broadcast_to(-light.direction, (m, 3))
            dist = np.full(m, np.inf)
            le = np.broadcast_to(light.radiance, (m, 3))
            geo = np.ones(m)
        else:
            if isinstance(light, PointLight):
                y = np.broadcast_to(light.position, (m, 3))
                le = np.broadcast_to(light.intensity, (m, 3))
            else:
                y = light.point_at(rng.random(m), rng.random(m))
                le = np.broadcast_to(light.radiance, (m, 3))
            wi = y - p
            dist = np.linalg.norm(wi, axis=1)
            wi = wi / np.maximum(dist, 1e-300)[:, None]
            geo = 1.0 / np.maximum(dist * dist, 1e-300)
            if not isinstance(light, PointLight):
                geo = geo * np.maximum(-(wi @ light.normal), 0.0) * light.area
        cos = np.maximum(np.einsum("nj,nj->n", wi, n_face), 0.0)
        lit = (cos > 0.0) & (geo > 0.0)
        if not np.any(lit):
            continue
        li = np.flatnonzero(lit)
        blocked = scene.occluded(scene.offset(p[li], n_face[li], wi[li]), wi[li], dist[li])
        contrib = np.zeros(m)
        contrib[li] = np.where(blocked, 0.0, cos[li] * geo[li])
        total += contrib[:, None] * le
    return total * albedo / math.pi


@dataclass
class CameraResult:
    caustics: np.ndarray
    direct: np.ndarray
    radius: np.ndarray
    gathered: np.ndarray
    ids: np.ndarray


def camera_pass(
    scene: Scene,
    pm: PhotonMap,
    pixels: np.ndarray,
    max_radius: float,
    n_emitted: int,
    max_depth: int,
    rng: np.random.Generator,
    k: int = 4,
) -> CameraResult:
    """
    One jittered eye ray per pixel index in `pixels`, specular chains followed,
    gather + direct lighting at the first diffuse hit.

    radius is NaN where no gather happened.
    """
    cam = scene.camera
    P = pixels.size
    jitter = rng.random((P, 2))
    o, d = _pixel_rays(cam, pixels, jitter)
    caustics = np.zeros((P, 3))
    direct = np.zeros((P, 3))
    radius = np.full(P, np.nan)
    gathered = np.zeros(P, dtype=np.int64)
    ids = np.full((P, k), -1, dtype=np.int64)
    alive = np.ones(P, dtype=bool)

    for _ in range(max_depth):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        hits = scene.intersect(o[idx], d[idx])
        u = rng.random(idx.size)
        alive[idx[~hits.hit]] = False
        sel = hits.hit
        hi = idx[sel]
        if hi.size == 0:
            continue
        surf = hits.surface[sel]
        p = hits.position[sel]
        nrm = hits.normal[sel]
        dir_in = d[hi]
        kind = scene.surface_kind(surf)
        diffuse = kind == DIFFUSE

        if np.any(diffuse):
            dj = hi[diffuse]
            pd = p[diffuse]
            nd = nrm[diffuse]
            facing = np.einsum("nj,nj->n", dir_in[diffuse], nd) < 0.0
            n_face = np.where(facing[:, None], nd, -nd)
            alb = scene.albedo[scene.surface_material[surf[diffuse]]]
            direct[dj] = direct_lighting(scene, pd, n_face, alb, rng)
            rec = scene.is_receiver[surf[diffuse]]
            if np.any(rec):
                rj = dj[rec]
                gb = gather_batch(pm, pd[rec], n_face[rec], max_radius, alb[rec], n_emitted, k)
                caustics[rj] = gb.radiance
                radius[rj] = gb.used_radius
                ids[rj] = gb.ids
                gathered[rj] = (gb.ids >= 0).sum(axis=1)
            alive[dj] = False

        spec = ~diffuse
        if np.any(spec):
            sj = hi[spec]
            new_d, _ = scatter_specular(
                scene, dir_in[spec], nrm[spec], kind[spec], scene.ior[scene.surface_material[surf[spec]]], u[sel][spec]
            )
            o[sj] = scene.offset(p[spec], nrm[spec], new_d)
            d[sj] = new_d

    return CameraResult(caustics, direct, radius, gathered, ids)


def _pixel_rays(cam, pixels: np.ndarray, jitter: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    full_jitter = np.full((cam.num_pixels, 2), 0.5)
    full_jitter[pixels] = jitter
    o, d = cam.generate_rays(full_jitter)
    return o[pixels], d[pixels]


def visible_receiver_points(scene: Scene, max_depth: int) -> np.ndarray:
    """First diffuse receiver hits of pixel-centre eye rays (mirror chains followed, glass refracted)"""
    o, d = scene.camera.generate_rays()
    out = []
    alive = np.ones(o.shape[0], dtype=bool)
    for _ in range(max_depth):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        hits = scene.intersect(o[idx], d[idx])
        alive[idx[~hits.hit]] = False
        sel = hits.hit
        hi = idx[sel]
        if hi.size == 0:
            continue
        surf = hits.surface[sel]
        kind = scene.surface_kind(surf)
        diffuse = kind == DIFFUSE
        rec = diffuse & scene.is_receiver[surf]
        out.append(hits.position[sel][rec])
        alive[hi[diffuse]] = False
        spec = ~diffuse
        if np.any(spec):
            sj = hi[spec]
            # refraction preferred: u = 1 always passes the Fresnel test unless TIR
            new_d, _ = scatter_specular(
                scene, d[sj], hits.normal[sel][spec], kind[spec],
                scene.ior[scene.surface_material[surf[spec]]], np.ones(sj.size),
            )
            o[sj] = scene.offset(hits.position[sel][spec], hits.normal[sel][spec], new_d)
            d[sj] = new_d
    return np.concatenate(out) if out else np.zeros((0, 3))


# ---------------------------------------------------------------------------
# Iterations
# ---------------------------------------------------------------------------


@dataclass
class Framebuffer:
    """Running means of the caustics and direct channels, plus last-iteration radius/gather maps"""

    width: int
    height: int
    caustics: np.ndarray = field(default=None)
    direct: np.ndarray = field(default=None)
    radius: np.ndarray = field(default=None)
    gathered: np.ndarray = field(default=None)
    samples: int = 0

    def __post_init__(self):
        shape = (self.height, self.width)
        if self.caustics is None:
            self.caustics = np.zeros(shape + (3,))
        if self.direct is None:
            self.direct = np.zeros(shape + (3,))
        if self.radius is None:
            self.radius = np.full(shape, np.nan)
        if self.gathered is None:
            self.gathered = np.zeros(shape, dtype=np.int64)

    @property
    def combined(self) -> np.ndarray:
        return self.caustics + self.direct

    def accumulate(self, result: "IterationResult") -> None:
        self.samples += 1
        w = 1.0 / self.samples
        shape = (self.height, self.width)
        self.caustics += (result.caustics.reshape(shape + (3,)) - self.caustics) * w
        self.direct += (result.direct.reshape(shape + (3,)) - self.direct) * w
        self.radius = result.radius.reshape(shape).copy()
        self.gathered = result.gathered_px.reshape(shape).copy()


@dataclass
class IterationResult:
    """
    Outcome of one photon + camera pass.

    training: per light id, one TrainingBatch over emissions that had a first bounce
    t_per_emission: gather count of the photon each emission deposited (0 if none)
    """

    iteration: int
    caustics: np.ndarray
    direct: np.ndarray
    radius: np.ndarray
    gathered_px: np.ndarray
    emissions: EmissionBatch
    trace: TraceResult
    photon_map: PhotonMap
    t_per_emission: np.ndarray
    training: Dict[int, TrainingBatch]
    gather_totals: np.ndarray
    emitted: int
    deposited: int
    visible: int
    gathered: int
    seconds: float = 0.0


def max_radius_for(scene: Scene, config: RenderConfig) -> float:
    return config.max_radius_factor * scene.diameter


def make_light_sampler(scene: Scene, config: RenderConfig) -> LightTree:
    if config.light_sampler is LightSamplerMode.UNIFORM:
        return UniformLightSampler(len(scene.lights))
    return LightTree(
        len(scene.lights),
        branch_threshold=config.branch_threshold,
        prior=config.light_tree_prior,
        update=config.light_tree_update.value,
    )


def render_iteration(
    scene: Scene,
    guider: BaseGuider,
    light_sampler: LightTree,
    config: RenderConfig,
    iteration: int,
    photons: Optional[int] = None,
) -> IterationResult:
    """
    One photon pass and one camera pass.

    Every random decision comes from rng_stream(seed, iteration, purpose, chunk),
    so results do not depend on the worker count.
    """
    start = time.perf_counter()
    ctx = RenderContext(scene, config, light_sampler, max_radius_for(scene, config))
    n = int(photons or config.photons_per_iteration)
    tags = {"guider": guider.kind.value}

    with TimerContext("render.photon_pass", tags):
        batch = guider.emit_photons(ctx, n, rng_stream(config.seed, iteration, STREAM_EMIT), iteration)
        chunks = list(enumerate(split_chunks(len(batch), config.chunk_size)))

        def trace_chunk(item):
            ci, sl = item
            rng = rng_stream(config.seed, iteration, STREAM_TRACE, ci)
            part = batch.take(np.arange(sl.start, sl.stop))
            return sl.start, trace_photons(scene, part, config.max_depth, rng, part.lobe_u)

        trace = TraceResult.merge(run_chunked(trace_chunk, chunks, config.workers)) if chunks else trace_photons(
            scene, batch, config.max_depth, rng_stream(config.seed, iteration, STREAM_TRACE, 0)
        )
        pm = build_photon_map(
            trace.position, trace.direction, trace.flux, trace.normal,
            batch.light_id[trace.emission], trace.first_bounce[trace.emission],
            batch.q_hat[trace.emission], trace.emission,
        )

    with TimerContext("render.camera_pass", tags):
        pixel_chunks = list(enumerate(split_chunks(scene.camera.num_pixels, config.chunk_size)))

        def camera_chunk(item):
            ci, sl = item
            rng = rng_stream(config.seed, iteration, STREAM_CAMERA, ci)
            return camera_pass(scene, pm, np.arange(sl.start, sl.stop), ctx.max_radius, n,
                               config.max_depth, rng, config.gather_k)

        parts = run_chunked(camera_chunk, pixel_chunks, config.workers)
        caustics = np.concatenate([c.caustics for c in parts])
        direct = np.concatenate([c.direct for c in parts])
        radius = np.concatenate([c.radius for c in parts])
        gathered_px = np.concatenate([c.gathered for c in parts])
        add_gathers(pm, np.concatenate([c.ids for c in parts]))

    t_per_emission = np.zeros(len(batch), dtype=np.int64)
    t_per_emission[pm.emission] = pm.gather_count
    L = len(scene.lights)
    gather_totals = np.bincount(pm.light_id, weights=pm.gather_count, minlength=L).astype(np.int64)

    training: Dict[int, TrainingBatch] = {}
    q_hat = batch.q_hat
    for lid in range(L):
        m = (batch.light_id == lid) & trace.has_first
        training[lid] = TrainingBatch(
            x=trace.first_bounce[m],
            q_hat=q_hat[m],
            t_count=t_per_emission[m],
            origins=batch.x0[m],
            directions=batch.omega[m],
            dir_pdf=batch.dir_pdf[m],
        )
        emitted_l = int(np.count_nonzero(batch.light_id == lid))
        ltags = {"guider": guider.kind.value, "light": lid}
        increment("photons.emitted", emitted_l, ltags)
        increment("photons.deposited", int(np.count_nonzero(pm.light_id == lid)), ltags)
        increment("photons.gathered", int(gather_totals[lid]), ltags)

    result = IterationResult(
        iteration=iteration,
        caustics=caustics,
        direct=direct,
        radius=radius,
        gathered_px=gathered_px,
        emissions=batch,
        trace=trace,
        photon_map=pm,
        t_per_emission=t_per_emission,
        training=training,
        gather_totals=gather_totals,
        emitted=len(batch),
        deposited=len(pm),
        visible=int(np.count_nonzero(pm.gather_count)),
        gathered=int(pm.gather_count.sum()),
        seconds=time.perf_counter() - start,
    )
    gauge("render.iteration", iteration, tags)
    logger.info(
        f"iteration {iteration}: emitted={result.emitted} deposited={result.deposited} "
        f"visible={result.visible} gathered={result.gathered} seconds={result.seconds:.3f}"
    )
    return result


def update_light_sampler(light_sampler: LightTree, result: IterationResult) -> None:
    light_sampler.begin_iteration()
    for lid, total in enumerate(result.gather_totals):
        light_sampler.record(lid, int(total))
    light_sampler.refine()


@dataclass
class RunResult:
    framebuffer: Framebuffer
    rows: List[MetricsRow]
    guider: BaseGuider
    light_sampler: LightTree
    last: Optional[IterationResult] = None


def metrics_row(iteration: int, fb: Framebuffer, reference: Optional[np.ndarray], gathered: int, seconds: float) -> MetricsRow:
    if reference is None:
        return MetricsRow(iteration, float("nan"), float("nan"), gathered, seconds)
    return MetricsRow(iteration, mse(fb.caustics, reference), 1.0 - ssim(fb.caustics, reference), gathered, seconds)


def run(
    scene: Scene,
    config: RenderConfig,
    guider: Optional[BaseGuider] = None,
    reference: Optional[np.ndarray] = None,
    on_iteration: Optional[Callable[[IterationResult, Framebuffer], None]] = None,
) -> RunResult:
    """
    Full render: iteration 0 is a uniform pass used only to initialize the guider
    (its image is discarded), iterations 1.. are guided and accumulated.
    """
    set_erf_backend(config.erf_backend)
    if guider is None:
        from services.guiders.guider_service import create_guider

        guider = create_guider(config)
    light_sampler = make_light_sampler(scene, config)
    ctx = RenderContext(scene, config, light_sampler, max_radius_for(scene, config))
    fb = Framebuffer(scene.camera.width, scene.camera.height)
    rows: List[MetricsRow] = []
    clock = time.perf_counter()

    init = render_iteration(scene, guider, light_sampler, config, 0, photons=config.init_photons)
    update_light_sampler(light_sampler, init)
    guider.initialize(ctx, init)
    record_event("guider.initialized", guider.describe())
    rows.append(metrics_row(0, fb, reference, init.visible, time.perf_counter() - clock))
    if on_iteration is not None:
        on_iteration(init, fb)
    last = init

    for it in range(1, config.iterations):
        result = render_iteration(scene, guider, light_sampler, config, it)
        fb.accumulate(result)
        update_light_sampler(light_sampler, result)
        guider.update(ctx, result)
        rows.append(metrics_row(it, fb, reference, result.visible, time.perf_counter() - clock))
        if on_iteration is not None:
            on_iteration(result, fb)
        last = result

    logger.info(
        f"Render finished: guider={guider.kind.value} iterations={config.iterations} "
        f"seconds={time.perf_counter() - clock:.2f}"
    )
    return RunResult(fb, rows, guider, light_sampler, last)


def uniform_pass(scene: Scene, config: RenderConfig, photons: int, iteration: int = 0) -> IterationResult:
    """Plain uniform photon + camera pass (used by the initializer)"""
    from services.guiders.uniform import UniformGuider

    cfg = config.model_copy(update={"guider": GuiderKind.UNIFORM})
    return render_iteration(scene, UniformGuider(cfg), make_light_sampler(scene, cfg), cfg, iteration, photons=photons)
