"""
von Mises-Fisher mixture guider
Per light, a mixture of vMF lobes over emission directions, fitted with the same
one-sample KL + Adam scheme as the spatial mixtures.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from scipy.special import expit, logsumexp, softmax

from services.emission import EmissionGuide
from services.error_handler import GuidingError, get_logger
from services.gmath import choose_components, orthonormal_basis
from services.guiders.base_guider import BaseGuider, RenderContext
from services.guiders.models import GuiderKind, VMFLobe
from services.guiding_optimizer import AdamState, lr_schedule
from services.initializer import kmeans
from services.performance import rng_stream
from services.scene import DirectionalLight

logger = get_logger(__name__)

INIT_KAPPA = 10.0
KAPPA_MIN = 1e-6
STREAM_INIT = 4


def _log_norm(kappa: np.ndarray) -> np.ndarray:
    """log of kappa / (2 pi (1 - exp(-2 kappa)))"""
    return np.log(kappa) - math.log(2.0 * math.pi) - np.log(-np.expm1(-2.0 * kappa))


def vmf_log_pdfs(nus: np.ndarray, kappas: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """(n, N) log densities of N lobes at n unit directions"""
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    cos = np.clip(omega @ np.atleast_2d(nus).T, -1.0, 1.0)
    kappas = np.atleast_1d(kappas)
    return _log_norm(kappas)[None, :] + kappas[None, :] * (cos - 1.0)


def vmf_pdf(lobe: VMFLobe, omega: np.ndarray) -> np.ndarray:
    return np.exp(vmf_log_pdfs(lobe.nu, np.array([lobe.kappa]), omega)[:, 0])


def _sample_lobes(nus: np.ndarray, kappas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = kappas.shape[0]
    u1, u2 = rng.random(n), rng.random(n)
    cos = np.clip(1.0 + np.log1p((1.0 - u1) * np.expm1(-2.0 * kappas)) / kappas, -1.0, 1.0)
    sin = np.sqrt(np.maximum(0.0, 1.0 - cos * cos))
    phi = 2.0 * math.pi * u2
    t, b = orthonormal_basis(nus)
    return (sin * np.cos(phi))[:, None] * t + (sin * np.sin(phi))[:, None] * b + cos[:, None] * nus


def vmf_sample(lobe: VMFLobe, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    count = 1 if n is None else n
    out = _sample_lobes(np.broadcast_to(lobe.nu, (count, 3)), np.full(count, lobe.kappa), rng)
    return out[0] if n is None else out


@dataclass
class VMFMixture:
    nus: np.ndarray
    kappas: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return self.kappas.shape[0]

    @property
    def lobes(self) -> List[VMFLobe]:
        return [VMFLobe(nu, k) for nu, k in zip(self.nus, self.kappas)]


def vmf_mixture_pdf(mix: VMFMixture, omega: np.ndarray) -> np.ndarray:
    return np.exp(logsumexp(vmf_log_pdfs(mix.nus, mix.kappas, omega), axis=1, b=mix.weights[None, :]))


def vmf_mixture_sample(mix: VMFMixture, rng: np.random.Generator, n: int) -> np.ndarray:
    comp = choose_components(mix.weights, rng, n)
    return _sample_lobes(mix.nus[comp], mix.kappas[comp], rng)


@dataclass
class EncodedVMF:
    """Unconstrained parameters: kappa = softplus(rho), nu = m / |m|, weights = softmax(raw_weight)"""

    m: np.ndarray
    rho: np.ndarray
    raw_weight: np.ndarray

    @classmethod
    def encode(cls, mix: VMFMixture) -> "EncodedVMF":
        kappa = np.maximum(mix.kappas, KAPPA_MIN)
        rho = kappa + np.log(-np.expm1(-kappa))
        return cls(mix.nus.copy(), rho, np.log(np.maximum(mix.weights, 1e-300)))

    def decode(self) -> VMFMixture:
        nus = self.m / np.linalg.norm(self.m, axis=1, keepdims=True)
        kappas = np.maximum(np.logaddexp(0.0, self.rho), KAPPA_MIN)
        return VMFMixture(nus, kappas, softmax(self.raw_weight))

    def params(self) -> Dict[str, np.ndarray]:
        return {"m": self.m, "rho": self.rho, "raw_weight": self.raw_weight}


def vmf_kl_gradient(
    enc: EncodedVMF, omega: np.ndarray, weights: np.ndarray, n: Optional[int] = None
) -> Dict[str, np.ndarray]:
    """Gradient of -(1/n) sum weights_k log q(omega_k) in the unconstrained parameters"""
    n = omega.shape[0] if n is None else n
    if omega.shape[0] == 0 or n <= 0:
        raise GuidingError("vMF fit needs a nonempty batch")
    mix = enc.decode()
    logp = vmf_log_pdfs(mix.nus, mix.kappas, omega)
    logw = logp + np.log(mix.weights)[None, :]
    r = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    rw = r * weights[:, None]
    cos = np.clip(omega @ mix.nus.T, -1.0, 1.0)

    k = mix.kappas
    dk = 1.0 / k - 2.0 / np.expm1(2.0 * k)
    d_kappa = rw * (dk[None, :] + cos - 1.0)
    g_rho = d_kappa.sum(axis=0) * expit(enc.rho)

    g_raw = rw.sum(axis=0) - weights.sum() * mix.weights

    norm = np.linalg.norm(enc.m, axis=1)
    tang = omega[:, None, :] - cos[:, :, None] * mix.nus[None, :, :]
    g_m = np.einsum("nc,ncj->cj", rw, tang) * (k / norm)[:, None]
    return {"m": -g_m / n, "rho": -g_rho / n, "raw_weight": -g_raw / n}


def vmf_kl_step(
    enc: EncodedVMF, adam: AdamState, omega: np.ndarray, weights: np.ndarray, lr: float, n: Optional[int] = None
) -> EncodedVMF:
    grads = vmf_kl_gradient(enc, omega, weights, n)
    out = EncodedVMF(enc.m.copy(), enc.rho.copy(), enc.raw_weight.copy())
    adam.step(out.params(), grads, lr)
    out.m /= np.linalg.norm(out.m, axis=1, keepdims=True)
    return out


def init_vmf_mixture(directions: np.ndarray, N: int, rng: np.random.Generator, max_iters: int = 32) -> VMFMixture:
    """k-means over the given unit directions; random directions when there are too few"""
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if dirs.shape[0] >= 1:
        centres = kmeans(dirs, min(N, dirs.shape[0]), max_iters, rng)
        centres = np.resize(centres, (N, 3))
    else:
        centres = rng.standard_normal((N, 3))
    norm = np.linalg.norm(centres, axis=1, keepdims=True)
    bad = norm[:, 0] < 1e-9
    if np.any(bad):
        centres[bad] = rng.standard_normal((int(bad.sum()), 3))
        norm = np.linalg.norm(centres, axis=1, keepdims=True)
    return VMFMixture(centres / norm, np.full(N, INIT_KAPPA), np.full(N, 1.0 / N))


class VMFGuide(EmissionGuide):
    def __init__(self, mix: VMFMixture):
        self.mix = mix

    def sample_directions(self, x0, rng):
        return vmf_mixture_sample(self.mix, rng, x0.shape[0])

    def direction_pdf(self, x0, omega):
        return vmf_mixture_pdf(self.mix, omega)


def _training_directions(batch):
    m = (batch.t_count > 0) & (batch.dir_pdf > 0.0)
    return batch.directions[m], batch.t_count[m] / batch.dir_pdf[m]


class VMFGuider(BaseGuider):
    kind = GuiderKind.VMF

    def __init__(self, config):
        super().__init__(config)
        self.encoded: Dict[int, EncodedVMF] = {}
        self.adam: Dict[int, AdamState] = {}

    def initialize(self, context: RenderContext, init_result) -> None:
        rng = rng_stream(self.config.seed, 0, STREAM_INIT)
        for lid, light in enumerate(context.scene.lights):
            if isinstance(light, DirectionalLight):
                continue
            batch = init_result.training.get(lid)
            dirs = _training_directions(batch)[0] if batch is not None and len(batch) else np.zeros((0, 3))
            mix = init_vmf_mixture(dirs, self.config.components, rng, self.config.kmeans_iters)
            self.encoded[lid] = EncodedVMF.encode(mix)
            self.adam[lid] = AdamState(self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps)
        logger.info(f"vMF guider initialized: {len(self.encoded)} lights x {self.config.components} lobes")

    def mixture(self, light_id: int) -> Optional[VMFMixture]:
        enc = self.encoded.get(light_id)
        return None if enc is None else enc.decode()

    def guide_for(self, light_id: int) -> Optional[VMFGuide]:
        mix = self.mixture(light_id)
        return None if mix is None else VMFGuide(mix)

    def update(self, context: RenderContext, result) -> None:
        total = max(self.config.iterations - 1, 1)
        lr = lr_schedule(min(max(result.iteration - 1, 0), total - 1), total)
        for lid, enc in self.encoded.items():
            batch = result.training.get(lid)
            if batch is None or len(batch) == 0:
                continue
            dirs, w = _training_directions(batch)
            if dirs.shape[0] == 0:
                continue
            self.encoded[lid] = vmf_kl_step(enc, self.adam[lid], dirs, w, lr, n=len(batch))
