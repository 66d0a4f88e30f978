"""
Testy pre photon emission (uniform and guided, per light type)
"""

import json
import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'backend'))

from services.diagnostics import chi_square_cos  # type: ignore
from services.emission import (  # type: ignore
    EmissionBatch,
    MixtureGuide,
    effective_beta,
    emission_pdf,
    emit_guided,
)
from services.error_handler import GuidingError  # type: ignore
from services.gmath import GaussianMixture, uniform_sphere  # type: ignore
from services.scene import parse_scene  # type: ignore

SCENE = parse_scene(json.dumps({
    "camera": {"position": [0, 2, 3], "look_at": [0, 0, 0], "width": 4, "height": 4},
    "lights": [
        {"type": "point", "position": [0, 2, 0], "intensity": [2, 2, 2]},
        {"type": "rect", "corner": [-0.5, 2, -0.5], "edge_u": [1, 0, 0], "edge_v": [0, 0, 1], "radiance": [3, 3, 3]},
        {"type": "directional", "direction": [0, -1, 0], "radiance": [1, 1, 1]},
    ],
    "materials": [{"name": "floor", "type": "diffuse"}, {"name": "glass", "type": "dielectric"}],
    "surfaces": [
        {"type": "tri_mesh", "material": "floor", "receiver": True,
         "vertices": [[-1, 0, -1], [1, 0, -1], [1, 0, 1], [-1, 0, 1]], "faces": [[0, 2, 1], [0, 3, 2]]},
        {"type": "sphere", "center": [0, 0.5, 0], "radius": 0.2, "material": "glass", "caster": True},
    ],
}))
POINT, RECT, DIRECTIONAL = SCENE.lights
GUIDE = MixtureGuide(GaussianMixture([0.7, 0.3], [[0.0, 0.5, 0.0], [0.3, 0.6, 0.1]], [0.2, 0.1]))


def test_uniform_point_emission():
    batch = emit_guided(POINT, None, 0.0, SCENE, np.random.default_rng(0), 100_000)
    assert np.allclose(batch.pdf, 1.0 / (4.0 * math.pi))
    assert np.allclose(batch.power, 2.0 * 4.0 * math.pi)
    assert np.allclose(batch.x0, POINT.position)
    p = chi_square_cos(batch.omega[:, 1], np.full(32, 1.0 / 32))
    assert p > 0.001, f"Point light directions should be uniform (p={p})"


def test_uniform_rect_emission():
    batch = emit_guided(RECT, None, 0.0, SCENE, np.random.default_rng(1), 50_000, light_id=1)
    cos = batch.omega @ RECT.normal
    assert np.all(cos >= 0.0)
    assert abs(cos.mean() - 2.0 / 3.0) < 0.01, "Cosine-weighted emission has mean cosine 2/3"
    assert np.allclose(batch.x0[:, 1], 2.0) and np.all(np.abs(batch.x0[:, [0, 2]]) <= 0.5)
    ok = batch.pdf > 0.0
    assert np.allclose(batch.power[ok], math.pi * RECT.area * 3.0)
    assert np.all(batch.light_id == 1)


def test_uniform_directional_emission():
    batch = emit_guided(DIRECTIONAL, None, 0.0, SCENE, np.random.default_rng(2), 20_000)
    b = SCENE.radius
    assert np.allclose(batch.pdf, 1.0 / (math.pi * b * b))
    assert np.allclose(batch.omega, [0.0, -1.0, 0.0])
    assert np.all(batch.dir_pdf == 0.0)
    offset = batch.x0 - SCENE.center
    assert np.allclose(offset[:, 1], b), "Emission plane sits one bounding radius before the scene"
    assert np.all(np.hypot(offset[:, 0], offset[:, 2]) <= b * (1.0 + 1e-12))
    outside = SCENE.center + np.array([[2.0 * b, b, 0.0]])
    assert emission_pdf(DIRECTIONAL, None, 0.0, SCENE, outside, [[0.0, -1.0, 0.0]])[0] == 0.0


def test_zero_beta_matches_uniform_exactly():
    for light in SCENE.lights:
        a = emit_guided(light, GUIDE, 0.0, SCENE, np.random.default_rng(3), 2000)
        b = emit_guided(light, None, 0.0, SCENE, np.random.default_rng(3), 2000)
        for name in ("x0", "omega", "pdf", "dir_pdf", "flux"):
            assert np.array_equal(getattr(a, name), getattr(b, name)), f"{light.kind}: {name} differs"


def test_guided_pdf_is_reported_exactly():
    for light in SCENE.lights:
        batch = emit_guided(light, GUIDE, 0.6, SCENE, np.random.default_rng(4), 5000)
        expected = emission_pdf(light, GUIDE, 0.6, SCENE, batch.x0, batch.omega)
        assert np.allclose(batch.pdf, expected, rtol=1e-12), f"{light.kind}: pdf mismatch"


def test_guided_point_emission_is_unbiased():
    """E[1/pdf] over the guided density equals the full sphere solid angle"""
    batch = emit_guided(POINT, GUIDE, 0.5, SCENE, np.random.default_rng(5), 200_000)
    est = np.mean(1.0 / batch.pdf)
    assert abs(est / (4.0 * math.pi) - 1.0) < 0.01, f"E[1/pdf] = {est:.4f}"
    toward = batch.omega @ np.array([0.0, -1.0, 0.0]) > 0.9
    assert toward.mean() > 0.3, "Guided emission should concentrate toward the caster"


def test_primary_sample_space():
    rng = np.random.default_rng(6)
    primary = rng.random((100, 4))
    batch = emit_guided(POINT, GUIDE, 0.8, SCENE, rng, 100, primary=primary)
    assert np.allclose(batch.omega, uniform_sphere(primary[:, 2], primary[:, 3]))
    assert np.allclose(batch.pdf, 1.0 / (4.0 * math.pi))


def test_emission_batch_helpers():
    batch = EmissionBatch(
        light_id=np.array([0, 1]), x0=np.zeros((2, 3)), omega=np.zeros((2, 3)),
        pdf=np.array([0.0, 2.0]), dir_pdf=np.array([0.0, 2.0]), flux=np.ones((2, 3)),
        pmf=np.array([1.0, 0.5]), lobe_u=np.full((2, 3), 0.5),
    )
    assert np.allclose(batch.power, [[0, 0, 0], [1, 1, 1]])
    assert np.allclose(batch.q_hat, [0.0, 1.0])
    both = EmissionBatch.concat([batch, batch.take(np.array([1]))])
    assert len(both) == 3 and both.lobe_u.shape == (3, 3)
    assert EmissionBatch.concat([batch, EmissionBatch.empty()]).lobe_u is not None
    mixed = EmissionBatch.concat([batch, emit_guided(POINT, None, 0.0, SCENE, np.random.default_rng(0), 2)])
    assert mixed.lobe_u is None
    assert len(EmissionBatch.concat([])) == 0


def test_effective_beta():
    assert effective_beta(None, 0.5, POINT) == 0.0
    assert effective_beta(GUIDE, 0.5, DIRECTIONAL) == 0.5
    try:
        effective_beta(GUIDE, 1.5, POINT)
        assert False, "beta above 1 should be rejected"
    except GuidingError:
        pass


if __name__ == "__main__":
    print("🧪 Testing emission...")
    print()

    tests = [
        ("Uniform point light", test_uniform_point_emission),
        ("Uniform rect light", test_uniform_rect_emission),
        ("Uniform directional light", test_uniform_directional_emission),
        ("beta = 0 is uniform", test_zero_beta_matches_uniform_exactly),
        ("Guided pdf", test_guided_pdf_is_reported_exactly),
        ("Guided emission unbiased", test_guided_point_emission_is_unbiased),
        ("Primary sample space", test_primary_sample_space),
        ("Emission batch helpers", test_emission_batch_helpers),
        ("Effective beta", test_effective_beta),
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
