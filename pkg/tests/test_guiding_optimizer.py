"""
Testy pre guiding optimizer (encoding, gradients, KL steps, Adam)
"""

import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'backend'))

from services.error_handler import GuidingError  # type: ignore
from services.gmath import GaussianMixture  # type: ignore
from services.guiding_optimizer import (  # type: ignore
    AdamState,
    EncodedMixture,
    TrainingBatch,
    TrainingSample,
    clamp_to_encodable,
    decode,
    grad_log_mixture,
    kl_gradient,
    kl_step,
    log_mixture_density_scaled,
    lr_schedule,
    scale_factor,
)


def test_scale_factor():
    assert scale_factor(20.0) == 1.0
    assert scale_factor(40.0) == 0.5
    assert abs(scale_factor(1e-3) - 20000.0) < 1e-9
    try:
        scale_factor(0.0)
        assert False, "Zero diameter should be rejected"
    except GuidingError:
        pass


def test_encoded_width_and_weights():
    enc = EncodedMixture(np.zeros((2, 3)), [0.0, 0.0], [math.log(3.0), 0.0])
    assert np.allclose(enc.scaled_sigma, 0.325)
    assert np.allclose(enc.weights, [0.75, 0.25])
    flat = EncodedMixture(np.zeros((32, 3)), np.zeros(32), np.full(32, 1.7))
    assert np.allclose(flat.weights, 1.0 / 32)


def test_encode_decode():
    B = 2.0
    m = GaussianMixture([0.2, 0.8], [[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]], [0.1, 0.3])
    back = decode(EncodedMixture.encode(m, B), B)
    assert np.allclose(back.means, m.means)
    assert np.allclose(back.sigmas, m.sigmas)
    assert np.allclose(back.weights, m.weights)


def test_width_cap():
    B = 1.0
    wide = GaussianMixture([1.0], [[0.0, 0.0, 0.0]], [5.0])
    try:
        EncodedMixture.encode(wide, B)
        assert False, "Width above the cap should not be encodable"
    except GuidingError:
        pass
    clamped = clamp_to_encodable(wide, B)
    assert clamped.sigmas[0] < 0.65
    EncodedMixture.encode(clamped, B)


def test_gradient_at_mean_is_zero():
    enc = EncodedMixture([[0.3, -0.2, 1.0]], [0.4], [0.0])
    g = grad_log_mixture(enc, enc.scaled_mu[0])
    assert np.allclose(g.scaled_mu, 0.0)
    assert np.allclose(g.raw_weight, 0.0)


def finite_difference_error(enc, x, h=1e-5):
    """Largest |analytic - central difference| / max(1, |fd|) over all encoded parameters"""
    g = grad_log_mixture(enc, x).as_dict()
    worst = 0.0
    for name, value in enc.params().items():
        for idx in np.ndindex(value.shape):
            plus, minus = enc.copy(), enc.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            fd = (log_mixture_density_scaled(plus, x)[0] - log_mixture_density_scaled(minus, x)[0]) / (2 * h)
            worst = max(worst, abs(g[name][idx] - fd) / max(1.0, abs(fd)))
    return worst


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    enc = EncodedMixture(rng.normal(scale=0.5, size=(3, 3)), rng.normal(size=3), rng.normal(size=3))
    x = rng.normal(scale=0.5, size=3)
    err = finite_difference_error(enc, x)
    assert err <= 1e-5, f"Relative gradient error {err:.3g}"


def test_gradient_on_random_mixtures():
    """100 random mixtures with 1..8 components, one random point each"""
    rng = np.random.default_rng(100)
    for trial in range(100):
        n = int(rng.integers(1, 9))
        enc = EncodedMixture(
            rng.normal(scale=0.5, size=(n, 3)), rng.uniform(-0.5, 1.5, size=n), rng.normal(size=n)
        )
        x = rng.normal(scale=0.5, size=3)
        err = finite_difference_error(enc, x)
        assert err <= 1e-5, f"Mixture {trial} (N={n}): relative gradient error {err:.3g}"


def test_count_scaling_gives_same_update():
    """Multiplying every gather count by c changes the raw gradient, not the Adam update"""
    rng = np.random.default_rng(5)
    enc = EncodedMixture(rng.normal(scale=0.5, size=(3, 3)), rng.normal(size=3), rng.normal(size=3))
    x = rng.normal(scale=0.5, size=(200, 3))
    q_hat = rng.uniform(0.5, 2.0, size=200)
    t = rng.integers(0, 4, size=200)
    c = 7

    ga = kl_gradient(enc, TrainingBatch(x, q_hat, t), 1.0)
    gb = kl_gradient(enc, TrainingBatch(x, q_hat, c * t), 1.0)
    assert np.allclose(gb.scaled_mu, c * ga.scaled_mu)

    adam_a, adam_b = AdamState(eps=1e-12), AdamState(eps=1e-12)
    a, b = enc, enc
    for _ in range(3):
        a = kl_step(a, adam_a, TrainingBatch(x, q_hat, t), 0.05, 1.0)
        b = kl_step(b, adam_b, TrainingBatch(x, q_hat, c * t), 0.05, 1.0)
        for name in ("scaled_mu", "p_sigma", "raw_weight"):
            diff = np.max(np.abs(getattr(a, name) - getattr(b, name)))
            assert diff <= 1e-6, f"{name} differs by {diff:.3g} after scaling the counts"


def test_gradient_vanishes_when_target_is_current_mixture():
    """
    Uniform proposals over a box, gather counts with mean proportional to q / q_hat:
    the averaged KL gradient stays within 3 standard errors of zero.
    """
    rng = np.random.default_rng(21)
    enc = EncodedMixture([[-0.4, 0.0, 0.1], [0.5, 0.2, -0.3]], [0.2, -0.3], [0.3, 0.0])
    n, half = 10_000, 2.5
    volume = (2.0 * half) ** 3
    x = rng.uniform(-half, half, size=(n, 3))
    q_hat = np.full(n, 1.0 / volume)
    q = np.exp(log_mixture_density_scaled(enc, x))
    t = rng.poisson(q / q_hat)

    rows = np.zeros((n, 3 * len(enc) + 2 * len(enc)))
    for k in np.flatnonzero(t):
        g = grad_log_mixture(enc, x[k]).as_dict()
        rows[k] = -(t[k] / q_hat[k]) * np.concatenate([v.ravel() for v in g.values()])

    batch_grad = kl_gradient(enc, TrainingBatch(x, q_hat, t), 1.0).as_dict()
    flat = np.concatenate([v.ravel() for v in batch_grad.values()])
    assert np.allclose(flat, rows.mean(axis=0)), "Per-sample rows must average to the batch gradient"

    se = rows.std(axis=0, ddof=1) / math.sqrt(n)
    stat = np.linalg.norm(flat)
    bound = 3.0 * np.linalg.norm(se)
    assert stat < bound, f"Averaged gradient norm {stat:.4g} exceeds 3 standard errors {bound:.4g}"


def test_zero_counts_leave_parameters():
    enc = EncodedMixture([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], [0.0, 0.5], [0.0, 0.2])
    batch = TrainingBatch(np.ones((5, 3)), np.ones(5), np.zeros(5, dtype=np.int64))
    adam = AdamState()
    out = kl_step(enc, adam, batch, 0.1, 1.0)
    assert adam.t == 1, "Adam step count must advance"
    for name in ("scaled_mu", "p_sigma", "raw_weight"):
        assert np.array_equal(getattr(out, name), getattr(enc, name))


def test_zero_counts_after_live_step():
    """Momentum from an earlier step must not move the parameters on an empty-gather batch"""
    rng = np.random.default_rng(11)
    enc = EncodedMixture([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], [0.0, 0.5], [0.0, 0.2])
    adam = AdamState()
    live = TrainingBatch(rng.normal(size=(64, 3)), np.ones(64), np.ones(64, dtype=np.int64))
    stepped = kl_step(enc, adam, live, 0.1, 1.0)
    assert adam.t == 1
    assert not np.array_equal(stepped.scaled_mu, enc.scaled_mu)
    moments = {k: v.copy() for k, v in adam.m.items()}

    empty = TrainingBatch(rng.normal(size=(8, 3)), np.ones(8), np.zeros(8, dtype=np.int64))
    out = kl_step(stepped, adam, empty, 0.1, 1.0)
    assert adam.t == 2, "Adam step count must advance"
    for name in ("scaled_mu", "p_sigma", "raw_weight"):
        change = np.max(np.abs(getattr(out, name) - getattr(stepped, name)))
        assert change == 0.0, f"{name} moved by {change} on a batch without gathers"
    for k, v in moments.items():
        assert np.array_equal(adam.m[k], v), "First moments must be left alone"


def test_kl_gradient_weights_by_count_over_pdf():
    enc = EncodedMixture([[0.0, 0.0, 0.0]], [0.0], [0.0])
    x = np.array([[0.1, 0.0, 0.0], [0.0, 0.2, 0.0]])
    a = kl_gradient(enc, TrainingBatch(x, [0.5, 1.0], [1, 2]), 1.0)
    b = kl_gradient(enc, TrainingBatch(x, [1.0, 1.0], [2, 2]), 1.0)
    assert np.allclose(a.scaled_mu, b.scaled_mu), "t/q_hat is the only sample weight"
    try:
        kl_gradient(enc, TrainingBatch.empty(), 1.0)
        assert False, "Empty batch should be rejected"
    except GuidingError:
        pass


def test_training_sample_validation():
    try:
        TrainingSample([0.0, 0.0, 0.0], 0.0, 1)
        assert False, "q_hat = 0 should be rejected"
    except GuidingError:
        pass
    batch = TrainingBatch.from_samples([TrainingSample([0, 0, 0], 0.5, 3), TrainingSample([1, 0, 0], 0.25, 0)])
    assert len(batch) == 2 and batch.gathered == 3
    assert batch.samples()[0].t_count == 3


def test_adam_update_is_clipped():
    adam = AdamState(eps=1e-8)
    params = {"p": np.zeros(2)}
    adam.step(params, {"p": np.array([1e-12, -5.0])}, 1.0)
    assert np.all(np.abs(params["p"]) <= 10.0 + 1e-12)
    assert params["p"][1] > 0.0 and params["p"][0] < 0.0


def test_lr_schedule():
    assert abs(lr_schedule(0, 64) - 0.1) < 1e-15
    assert abs(lr_schedule(63, 64) - 0.01) < 1e-15
    assert abs(lr_schedule(1, 3) - math.sqrt(0.1 * 0.01)) < 1e-12
    assert lr_schedule(0, 1) == 0.1
    try:
        lr_schedule(64, 64)
        assert False, "Iteration past the end should be rejected"
    except GuidingError:
        pass


def fit_two_gaussians(seed, start_means=None, steps=512):
    """
    Two separated targets, constant emission pdf, every sample gathered once;
    unless given, the start means are drawn anywhere in the data's bounding box.
    Returns (mean errors after matching by x, fitted weights).
    """
    rng = np.random.default_rng(seed)
    targets = np.array([[-3.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    sigma = 0.5
    x = np.concatenate([targets[i] + sigma * rng.standard_normal((1000, 3)) for i in range(2)])
    batch = TrainingBatch(x, np.ones(len(x)), np.ones(len(x), dtype=np.int64))

    B = 1.0
    if start_means is None:
        start_means = rng.uniform([-4.0, -1.0, -1.0], [4.0, 1.0, 1.0], size=(2, 3))
    enc = EncodedMixture.encode(GaussianMixture([0.5, 0.5], start_means, [0.3, 0.3]), B)
    adam = AdamState()
    for it in range(steps):
        enc = kl_step(enc, adam, batch, lr_schedule(it, steps), B)

    fitted = decode(enc, B)
    order = np.argsort(fitted.means[:, 0])
    sample_means = np.array([x[:1000].mean(axis=0), x[1000:].mean(axis=0)])
    errors = np.linalg.norm(fitted.means[order] - sample_means, axis=1)
    return errors, fitted.weights[order]


def test_fit_recovers_two_gaussians():
    errors, weights = fit_two_gaussians(2024, start_means=[[-2.5, 0.3, 0.0], [2.6, -0.2, 0.1]])
    assert np.all(errors < 0.05), f"Fitted means are {errors} away from the targets"
    assert np.allclose(weights, 0.5, atol=0.05)


def test_fit_recovers_two_gaussians_over_seeds():
    """At least 9 of 10 seeded fits land within 0.1 sigma of both targets"""
    ok = 0
    for seed in range(10):
        errors, weights = fit_two_gaussians(seed)
        if np.all(errors < 0.05) and np.allclose(weights, 0.5, atol=0.05):
            ok += 1
    assert ok >= 9, f"Only {ok} of 10 fits recovered the targets"


if __name__ == "__main__":
    print("🧪 Testing guiding optimizer...")
    print()

    tests = [
        ("Scale factor", test_scale_factor),
        ("Encoded width and weights", test_encoded_width_and_weights),
        ("Encode / decode", test_encode_decode),
        ("Width cap", test_width_cap),
        ("Gradient at mean", test_gradient_at_mean_is_zero),
        ("Gradient vs finite differences", test_gradient_matches_finite_differences),
        ("Gradient on 100 random mixtures", test_gradient_on_random_mixtures),
        ("Count scaling cancels", test_count_scaling_gives_same_update),
        ("Gradient at the fixed point", test_gradient_vanishes_when_target_is_current_mixture),
        ("Zero counts", test_zero_counts_leave_parameters),
        ("Zero counts after a live step", test_zero_counts_after_live_step),
        ("KL sample weights", test_kl_gradient_weights_by_count_over_pdf),
        ("Training sample validation", test_training_sample_validation),
        ("Adam clipping", test_adam_update_is_clipped),
        ("Learning rate schedule", test_lr_schedule),
        ("Two-Gaussian fit", test_fit_recovers_two_gaussians),
        ("Two-Gaussian fit over 10 seeds", test_fit_recovers_two_gaussians_over_seeds),
    ]

    passed = 0
    failed = 0

    for name, test_func in tests:
        try:
            test_func()
            print(f"✅ {name}")
            passed += 1
        except Exception as e:
            print(f"❌ {name}: {e}")
            failed += 1

    print()
    print("═══════════════════════════════════════")
    print(f"📊 Results: {passed} passed, {failed} failed")
    print("═══════════════════════════════════════")

    if failed > 0:
        sys.exit(1)
