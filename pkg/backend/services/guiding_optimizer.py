"""
Guiding optimizer
Encoded mixture parameters, analytic log-density gradients and one-sample
KL-divergence updates with Adam.

Optimization runs in scaled space: positions are multiplied by B = c_b / R_b and
sigma_scaled = c_s * sigmoid(p_sigma), so c_s caps the width independently of scene size.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

import numpy as np
from scipy import special

from services.error_handler import GuidingError
from services.gmath import GaussianMixture

C_B = 20.0
C_S = 0.65
LR_START = 0.1
LR_END = 0.01
UPDATE_CLIP = 10.0

PARAM_NAMES = ("scaled_mu", "p_sigma", "raw_weight")


def scale_factor(scene_bounding_diameter: float) -> float:
    """B = c_b / R_b"""
    r_b = float(scene_bounding_diameter)
    if not (math.isfinite(r_b) and r_b > 0.0):
        raise GuidingError(f"Scene bounding diameter must be positive, got {r_b}")
    return C_B / r_b


@dataclass
class EncodedMixture:
    """
    Optimizer-facing parameters of a mixture.

    scaled_mu: (N, 3) world positions times B
    p_sigma: (N,) pre-sigmoid width
    raw_weight: (N,) pre-softmax weight
    """

    scaled_mu: np.ndarray
    p_sigma: np.ndarray
    raw_weight: np.ndarray

    def __post_init__(self):
        self.scaled_mu = np.array(self.scaled_mu, dtype=np.float64).reshape(-1, 3)
        self.p_sigma = np.array(self.p_sigma, dtype=np.float64).reshape(-1)
        self.raw_weight = np.array(self.raw_weight, dtype=np.float64).reshape(-1)
        n = self.scaled_mu.shape[0]
        if n == 0 or self.p_sigma.size != n or self.raw_weight.size != n:
            raise GuidingError("Encoded mixture arrays must be nonempty and agree in length")

    def __len__(self) -> int:
        return self.scaled_mu.shape[0]

    @property
    def scaled_sigma(self) -> np.ndarray:
        return C_S * special.expit(self.p_sigma)

    @property
    def weights(self) -> np.ndarray:
        return special.softmax(self.raw_weight)

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "EncodedMixture":
        return EncodedMixture(self.scaled_mu.copy(), self.p_sigma.copy(), self.raw_weight.copy())

    @classmethod
    def encode(cls, mixture: GaussianMixture, B: float) -> "EncodedMixture":
        """Inverse of decode; widths must satisfy sigma * B < c_s"""
        s = mixture.sigmas * B / C_S
        if np.any(s >= 1.0):
            raise GuidingError(
                f"Gaussian width {mixture.sigmas.max():.6g} exceeds the encodable cap {C_S / B:.6g}"
            )
        with np.errstate(divide="ignore"):
            raw = np.log(mixture.weights)
        raw = np.where(np.isfinite(raw), raw, -745.0)
        return cls(
            scaled_mu=mixture.means * B,
            p_sigma=special.logit(s),
            raw_weight=raw - raw.max(),
        )


def clamp_to_encodable(mixture: GaussianMixture, B: float, margin: float = 0.999) -> GaussianMixture:
    """Caps component widths just below c_s / B so the mixture can be encoded"""
    cap = margin * C_S / B
    return GaussianMixture(mixture.weights, mixture.means, np.minimum(mixture.sigmas, cap))


def decode(enc: EncodedMixture, B: float) -> GaussianMixture:
    """World-space mixture: mu = scaled_mu / B, sigma = c_s * sigmoid(p_sigma) / B, w = softmax(w')"""
    w = enc.weights
    return GaussianMixture(weights=w / w.sum(), means=enc.scaled_mu / B, sigmas=enc.scaled_sigma / B)


@dataclass
class EncodedGradient:
    scaled_mu: np.ndarray
    p_sigma: np.ndarray
    raw_weight: np.ndarray

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def norm(self) -> float:
        return float(math.sqrt(sum(np.sum(g * g) for g in self.as_dict().values())))


def _log_components(enc: EncodedMixture, x_scaled: np.ndarray):
    """log(w_i N_i(x)), squared distances and per-component widths for a batch (M, 3)"""
    s = enc.scaled_sigma
    s2 = s * s
    diff = x_scaled[:, None, :] - enc.scaled_mu[None, :, :]
    r2 = np.sum(diff * diff, axis=-1)
    log_w = enc.raw_weight - special.logsumexp(enc.raw_weight)
    log_n = -1.5 * np.log(2.0 * math.pi * s2) - r2 / (2.0 * s2)
    return log_w + log_n, diff, r2, s


def log_mixture_density_scaled(enc: EncodedMixture, x_scaled: np.ndarray) -> np.ndarray:
    """log q(x) of the encoded-space mixture"""
    x = np.atleast_2d(np.asarray(x_scaled, dtype=np.float64))
    log_wn, _, _, _ = _log_components(enc, x)
    return special.logsumexp(log_wn, axis=1)


def weighted_gradient(enc: EncodedMixture, x_scaled: np.ndarray, weights: np.ndarray) -> EncodedGradient:
    """
    Sum over samples of weights_k * grad log q(x_k), for all encoded parameters.

    d log q / d mu_i     = r_i (x - mu_i) / s_i^2
    d log q / d s_i      = r_i (|x - mu_i|^2 / s_i^3 - 3 / s_i),  ds/dp = s (1 - sigmoid(p))
    d log q / d w'_j     = r_j - w_j
    with responsibilities r_i = w_i N_i(x) / q(x).
    """
    x = np.atleast_2d(np.asarray(x_scaled, dtype=np.float64))
    wk = np.asarray(weights, dtype=np.float64).reshape(-1)
    log_wn, diff, r2, s = _log_components(enc, x)
    resp = np.exp(log_wn - special.logsumexp(log_wn, axis=1, keepdims=True))
    wr = resp * wk[:, None]

    s2 = s * s
    g_mu = np.einsum("mn,mnk->nk", wr, diff) / s2[:, None]
    d_ds = (wr * (r2 / (s2 * s)[None, :] - 3.0 / s[None, :])).sum(axis=0)
    g_p = d_ds * s * (1.0 - special.expit(enc.p_sigma))
    g_w = wr.sum(axis=0) - enc.weights * wk.sum()
    return EncodedGradient(scaled_mu=g_mu, p_sigma=g_p, raw_weight=g_w)


def grad_log_mixture(enc: EncodedMixture, x_scaled: np.ndarray) -> EncodedGradient:
    """Analytic gradient of log q at a single scaled-space point"""
    x = np.asarray(x_scaled, dtype=np.float64).reshape(1, 3)
    return weighted_gradient(enc, x, np.ones(1))


@dataclass
class AdamState:
    """First/second moment accumulators per parameter and the step counter"""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        """In-place descent step on params; the per-parameter update is clipped at UPDATE_CLIP"""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t

        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])

            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)

            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            params[k] -= lr * np.clip(update, -UPDATE_CLIP, UPDATE_CLIP)


@dataclass
class TrainingSample:
    """First-bounce point, emission pdf at generation time and gather count"""

    x: np.ndarray
    q_hat: float
    t_count: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(3)
        if not self.q_hat > 0.0:
            raise GuidingError(f"Training sample emission pdf must be positive, got {self.q_hat}")
        if self.t_count < 0:
            raise GuidingError("Training sample gather count must be nonnegative")


@dataclass
class TrainingBatch:
    """
    Struct-of-arrays batch of training samples for one light.

    origins/directions are the emission rays, kept for the directional baselines;
    dir_pdf is the directional part of q_hat (0 for infinite lights).
    """

    x: np.ndarray
    q_hat: np.ndarray
    t_count: np.ndarray
    origins: Optional[np.ndarray] = None
    directions: Optional[np.ndarray] = None
    dir_pdf: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 3)
        self.q_hat = np.asarray(self.q_hat, dtype=np.float64).reshape(-1)
        self.t_count = np.asarray(self.t_count, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.x.shape[0]

    @classmethod
    def empty(cls) -> "TrainingBatch":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> "TrainingBatch":
        if not samples:
            return cls.empty()
        return cls(
            x=np.stack([s.x for s in samples]),
            q_hat=np.array([s.q_hat for s in samples]),
            t_count=np.array([s.t_count for s in samples]),
        )

    def samples(self):
        return [TrainingSample(x, float(q), int(t)) for x, q, t in zip(self.x, self.q_hat, self.t_count)]

    @property
    def gathered(self) -> int:
        return int(self.t_count.sum())


def kl_gradient(enc: EncodedMixture, batch: TrainingBatch, B: float) -> EncodedGradient:
    """Gradient estimate -(1/|batch|) sum (t_k / q_hat_k) grad log q(x_k B)"""
    n = len(batch)
    if n == 0:
        raise GuidingError("KL step needs a nonempty batch")
    active = batch.t_count > 0
    if not np.any(active):
        zeros = enc.copy()
        return EncodedGradient(
            np.zeros_like(zeros.scaled_mu), np.zeros_like(zeros.p_sigma), np.zeros_like(zeros.raw_weight)
        )
    w = batch.t_count[active] / batch.q_hat[active]
    g = weighted_gradient(enc, batch.x[active] * B, w)
    return EncodedGradient(-g.scaled_mu / n, -g.p_sigma / n, -g.raw_weight / n)


def kl_step(
    enc: EncodedMixture,
    adam: AdamState,
    batch: Union[TrainingBatch, Sequence[TrainingSample]],
    lr: float,
    B: float,
) -> EncodedMixture:
    """
    One Adam step on the one-sample KL estimate; returns the updated parameters.

    A batch without gathered samples only advances the step counter; the moments
    are left alone so stale momentum cannot move the parameters.
    """
    if not isinstance(batch, TrainingBatch):
        batch = TrainingBatch.from_samples(list(batch))
    if len(batch) == 0:
        raise GuidingError("KL step needs a nonempty batch")
    if not np.any(batch.t_count > 0):
        adam.t += 1
        return enc.copy()
    grad = kl_gradient(enc, batch, B)
    out = enc.copy()
    params = out.params()
    adam.step(params, grad.as_dict(), lr)
    return EncodedMixture(params["scaled_mu"], params["p_sigma"], params["raw_weight"])


def lr_schedule(iteration: int, total: int) -> float:
    """0.1 at the first iteration, 0.01 at the last, geometric in between"""
    if total <= 0 or not 0 <= iteration < total:
        raise GuidingError(f"Iteration {iteration} outside [0, {total})")
    if total == 1:
        return LR_START
    frac = iteration / (total - 1)
    return LR_START * (LR_END / LR_START) ** frac
