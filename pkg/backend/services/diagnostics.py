"""
Distribution diagnostics
Quadrature and goodness-of-fit checks of the guiding distributions, used by the
test-dist command.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy import integrate, stats

from services.error_handler import get_logger
from services.gmath import (
    Gaussian3,
    directional_pdf_component,
    eval_gaussian,
    orthonormal_basis,
    sample_direction,
)
from services.guiders.bound import bound_pdf
from services.guiders.histogram import h2d_pdf, h2d_record, h2d_sample
from services.guiders.models import BoundGuide, Histogram2D, VMFLobe
from services.guiders.vmf import vmf_pdf, vmf_sample
from services.performance import rng_stream

logger = get_logger(__name__)

K_GRID = (0.0, 0.5, 1.0, 2.0, 5.0, 20.0)
COS_GRID = (-1.0, -0.5, 0.0, 0.5, 0.9, 1.0)

Pdf = Callable[[np.ndarray], np.ndarray]


@dataclass
class DiagnosticResult:
    name: str
    passed: bool
    value: float
    tolerance: float

    def line(self) -> str:
        mark = "✅" if self.passed else "❌"
        return f"{mark} {self.name}: {self.value:.3e} (tolerance {self.tolerance:.1e})"


def sphere_quadrature(
    pdf: Pdf, axis: Sequence[float] = (0.0, 0.0, 1.0), n_theta: int = 200, n_phi: int = 100
) -> float:
    """
    Integral of pdf over the unit sphere on a Gauss-Legendre (theta) x uniform (phi)
    grid whose pole is `axis`; peaked densities should pass their peak direction.
    """
    z = np.asarray(axis, dtype=np.float64)
    z = z / np.linalg.norm(z)
    t, b = orthonormal_basis(z)
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = 0.5 * math.pi * (x + 1.0)
    w_theta = 0.5 * math.pi * w * np.sin(theta)
    phi = (np.arange(n_phi) + 0.5) * (2.0 * math.pi / n_phi)
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    dirs = (st * np.cos(phi))[..., None] * t + (st * np.sin(phi))[..., None] * b + ct[..., None] * z
    vals = pdf(dirs.reshape(-1, 3)).reshape(n_theta, n_phi)
    return float((vals.sum(axis=1) * w_theta).sum() * (2.0 * math.pi / n_phi))


def radial_density(k: float, cos: float) -> float:
    """Solid-angle density of a unit-sigma Gaussian at distance k, by radial quadrature of r^2 G"""
    g = Gaussian3([0.0, 0.0, k], 1.0)
    sin = math.sqrt(max(0.0, 1.0 - cos * cos))
    omega = np.array([sin, 0.0, cos])
    f = lambda r: r * r * float(eval_gaussian(g, omega * r))  # noqa: E731
    peak = max(k * cos, 0.0)
    val = 0.0
    for lo, hi in ((0.0, peak), (peak, peak + 12.0), (peak + 12.0, np.inf)):
        if hi > lo:
            val += integrate.quad(f, lo, hi, epsabs=0.0, epsrel=1e-12, limit=200)[0]
    return val / (2.0 * math.pi) ** 1.5


def _unit_pdf(k: float, cos: float) -> float:
    """Closed-form density of a unit-sigma Gaussian at distance k, along the direction with the given cos"""
    sin = math.sqrt(max(0.0, 1.0 - cos * cos))
    return float(directional_pdf_component(Gaussian3([0.0, 0.0, k], 1.0), np.zeros(3), np.array([sin, 0.0, cos])))


def check_closed_form(tol: float = 1e-6) -> DiagnosticResult:
    worst = 0.0
    for k in K_GRID:
        for c in COS_GRID:
            ref = radial_density(k, c)
            got = _unit_pdf(k, c)
            if ref > 1e-280:
                worst = max(worst, abs(got - ref) / ref)
    return DiagnosticResult("closed form vs radial quadrature", worst <= tol, worst, tol)


def check_normalization(tol: float = 1e-4) -> DiagnosticResult:
    worst = 0.0
    for k in K_GRID:
        g = Gaussian3([0.0, 0.0, k], 1.0)
        total = sphere_quadrature(lambda w: directional_pdf_component(g, np.zeros(3), w))
        worst = max(worst, abs(total - 1.0))
    return DiagnosticResult("directional pdf normalization", worst <= tol, worst, tol)


def cos_bin_probabilities(k: float, bins: int = 64) -> np.ndarray:
    """Probability of each equal-width cos(theta) bin under the directional density"""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    f = lambda c: 2.0 * math.pi * _unit_pdf(k, c)  # noqa: E731
    p = np.array([integrate.quad(f, a, b, epsabs=0.0, epsrel=1e-10)[0] for a, b in zip(edges[:-1], edges[1:])])
    return p / p.sum()


def chi_square_cos(observed_cos: np.ndarray, probs: np.ndarray, min_expected: float = 5.0) -> float:
    """p-value of the binned cos(theta) sample; bins with small expectation are pooled"""
    bins = probs.size
    obs = np.bincount(np.minimum(((observed_cos + 1.0) * 0.5 * bins).astype(np.int64), bins - 1), minlength=bins)
    exp = probs * obs.sum()
    keep = exp >= min_expected
    o, e = list(obs[keep]), list(exp[keep])
    if np.any(~keep):
        o.append(obs[~keep].sum())
        e.append(exp[~keep].sum())
    return float(stats.chisquare(np.array(o, dtype=np.float64), np.array(e)).pvalue)


def check_sampling(n: int = 1_000_000, seed: int = 0, alpha: float = 0.01) -> List[DiagnosticResult]:
    out = []
    for k in (0.0, 1.0, 5.0):
        rng = rng_stream(seed, 7, int(k * 10))
        g = Gaussian3([0.0, 0.0, k], 1.0)
        dirs = sample_direction(g, np.zeros(3), rng, n)
        p = chi_square_cos(dirs[:, 2], cos_bin_probabilities(k))
        out.append(DiagnosticResult(f"chi-square cos(theta) d/sigma={k:g}", p > alpha, p, alpha))
    return out


def self_integral(sample: Callable[[np.random.Generator, int], Tuple[np.ndarray, np.ndarray]],
                  rng: np.random.Generator, n: int) -> float:
    """Monte Carlo estimate of the sphere area from a sampler's own (direction, pdf) pairs"""
    _, pdf = sample(rng, n)
    return float(np.mean(1.0 / pdf))


def check_baselines(seed: int = 0, n: int = 400_000) -> List[DiagnosticResult]:
    out = []
    lobe = VMFLobe([0.0, 0.0, 1.0], 1.0)
    for kappa in (0.1, 1.0, 10.0, 100.0):
        lk = VMFLobe([0.0, 0.0, 1.0], kappa)
        total = sphere_quadrature(lambda w: vmf_pdf(lk, w), n_theta=400)
        out.append(DiagnosticResult(f"vMF normalization kappa={kappa:g}", abs(total - 1.0) <= 1e-5, abs(total - 1.0), 1e-5))

    def vmf_pairs(r, m):
        d = vmf_sample(lobe, r, m)
        return d, vmf_pdf(lobe, d)

    est = self_integral(vmf_pairs, rng_stream(seed, 8, 0), n)
    out.append(_self_check("vMF", est))

    h = Histogram2D(np.zeros(3), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), 32)
    v = rng_stream(seed, 8, 1).standard_normal((20000, 3)) + [0.0, 0.0, 0.5]
    h2d_record(h, v / np.linalg.norm(v, axis=1, keepdims=True), 1.0)
    total = sphere_quadrature(lambda w: h2d_pdf(h, w), n_theta=256, n_phi=256)
    out.append(DiagnosticResult("H2D normalization", abs(total - 1.0) <= 1e-2, abs(total - 1.0), 1e-2))
    est = self_integral(lambda r, m: h2d_sample(h, r, m), rng_stream(seed, 8, 2), n)
    out.append(_self_check("H2D", est))

    bg = BoundGuide([[-0.5, -0.5, -0.5]], [[0.5, 0.5, 0.5]])
    x0 = np.zeros(3)
    total = sphere_quadrature(lambda w: bound_pdf(bg, x0, w), n_theta=400, n_phi=400)
    out.append(DiagnosticResult("bound normalization", abs(total - 1.0) <= 1e-3, abs(total - 1.0), 1e-3))
    return out


def _self_check(name: str, estimate: float, tol: float = 0.01) -> DiagnosticResult:
    err = abs(estimate / (4.0 * math.pi) - 1.0)
    return DiagnosticResult(f"{name} self-integral", err <= tol, err, tol)


def run_diagnostics(seed: int = 0, samples: int = 1_000_000) -> List[DiagnosticResult]:
    results = [check_closed_form(), check_normalization()]
    results += check_sampling(samples, seed)
    results += check_baselines(seed)
    failed = [r for r in results if not r.passed]
    if failed:
        logger.warning(f"{len(failed)} of {len(results)} distribution checks failed")
    else:
        logger.info(f"All {len(results)} distribution checks passed")
    return results
