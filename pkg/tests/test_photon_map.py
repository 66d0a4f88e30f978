"""
Testy pre photon map (KD-tree queries, adaptive-radius gathering)
"""

import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'backend'))

from services.error_handler import GuidingError  # type: ignore
from services.photon_map import (  # type: ignore
    Photon,
    PhotonMap,
    add_gathers,
    build_photon_map,
    gather,
    gather_batch,
    knn,
    photon_map_from,
)

UP = np.array([0.0, 1.0, 0.0])


def floor_map(points, flux=1.0):
    """Photons lying on y = 0, arriving from above"""
    n = len(points)
    pos = np.column_stack([points[:, 0], np.zeros(n), points[:, 1]])
    return build_photon_map(
        pos, np.tile(-UP, (n, 1)), np.full((n, 3), flux), np.tile(UP, (n, 1)),
        np.zeros(n, dtype=np.int64), pos, np.ones(n), np.arange(n),
    )


def test_knn_sorted_and_bounded():
    pm = floor_map(np.array([[0.0, 0.0], [0.1, 0.0], [0.3, 0.0], [2.0, 0.0]]))
    d, idx = knn(pm, [0.0, 0.0, 0.0], 3)
    assert list(idx) == [0, 1, 2]
    assert np.all(np.diff(d) >= 0.0)
    d, idx = knn(pm, [0.0, 0.0, 0.0], 10, max_radius=0.2)
    assert list(idx) == [0, 1]
    d, idx = knn(PhotonMap.empty(), [0.0, 0.0, 0.0], 4)
    assert d.size == 0 and idx.size == 0


def test_knn_matches_linear_scan():
    rng = np.random.default_rng(17)
    n = 1000
    pos = rng.uniform(-1.0, 1.0, size=(n, 3))
    pm = build_photon_map(
        pos, np.tile(-UP, (n, 1)), np.ones((n, 3)), np.tile(UP, (n, 1)),
        np.zeros(n, dtype=np.int64), pos, np.ones(n), np.arange(n),
    )
    queries = rng.uniform(-1.2, 1.2, size=(100, 3))
    for k, radius in ((4, np.inf), (16, np.inf), (4, 0.15)):
        for x in queries:
            d, idx = knn(pm, x, k, max_radius=radius)
            dist = np.linalg.norm(pos - x, axis=1)
            order = np.argsort(dist)[:k]
            expected = order[dist[order] < radius]
            assert set(idx.tolist()) == set(expected.tolist()), f"k={k} r={radius} at {x}"
            assert np.allclose(d, dist[idx])


def test_uniform_irradiance_estimate():
    """k-nearest density estimate of a uniform photon field"""
    rng = np.random.default_rng(0)
    n = 10_000
    pm = floor_map(rng.random((n, 2)))
    g = np.linspace(0.4, 0.6, 5)
    qx, qz = np.meshgrid(g, g)
    pts = np.column_stack([qx.ravel(), np.zeros(qx.size), qz.ravel()])
    gb = gather_batch(pm, pts, np.tile(UP, (len(pts), 1)), 1.0, np.ones((len(pts), 3)), 1, k=1000)
    expected = n / math.pi
    est = gb.radiance[:, 0].mean()
    assert abs(est / expected - 1.0) < 0.05, f"Estimate {est:.1f} vs {expected:.1f}"
    assert np.all(gb.used_radius < 1.0)


def test_partial_gather_uses_max_radius():
    pm = floor_map(np.array([[0.0, 0.0], [0.05, 0.0]]), flux=2.0)
    rgb, r, ids = gather(pm, [0.0, 0.0, 0.0], UP, 0.1, albedo=(0.5, 0.5, 0.5), n_emitted=10, k=4)
    assert r == 0.1
    assert sorted(ids) == [0, 1]
    expected = 4.0 * 0.5 / math.pi / (math.pi * 0.01 * 10)
    assert np.allclose(rgb, expected)


def test_photons_facing_away_are_skipped():
    pm = floor_map(np.array([[0.0, 0.0], [0.01, 0.0]]))
    rgb, r, ids = gather(pm, [0.0, 0.0, 0.0], -UP, 0.5)
    assert ids == [] and np.all(rgb == 0.0) and r == 0.5


def test_full_gather_uses_kth_distance():
    pm = floor_map(np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.2], [0.3, 0.0], [0.0, 0.9]]))
    rgb, r, ids = gather(pm, [0.0, 0.0, 0.0], UP, 1.0, k=4)
    assert abs(r - 0.3) < 1e-12
    assert sorted(ids) == [0, 1, 2, 3]
    assert np.allclose(rgb, 4.0 / math.pi / (math.pi * 0.09))


def test_add_gathers_counts_events():
    pm = floor_map(np.array([[0.0, 0.0], [0.1, 0.0], [0.2, 0.0]]))
    add_gathers(pm, np.array([[0, 1, -1], [1, -1, -1], [1, 2, -1]]))
    assert list(pm.gather_count) == [1, 3, 1]


def test_photon_records():
    photons = [
        Photon(np.array([0.0, 0.0, 0.0]), np.array([0.0, -1.0, 0.0]), np.ones(3), 0, np.array([0.0, 0.5, 0.0]), 0.5, 2),
        Photon(np.array([1.0, 0.0, 0.0]), np.array([0.6, -0.8, 0.0]), np.ones(3), 1, np.array([1.0, 0.5, 0.0]), 0.25),
    ]
    pm = photon_map_from(photons)
    assert len(pm) == 2
    assert np.allclose(pm.normal[1], [-0.6, 0.8, 0.0])
    assert list(pm.gather_count) == [2, 0]
    assert pm.photon(1).light_id == 1
    assert len(photon_map_from([])) == 0


def test_invalid_radius():
    pm = floor_map(np.array([[0.0, 0.0]]))
    try:
        gather(pm, [0.0, 0.0, 0.0], UP, 0.0)
        assert False, "Zero radius should be rejected"
    except GuidingError:
        pass


if __name__ == "__main__":
    print("🧪 Testing photon map...")
    print()

    tests = [
        ("k-nearest queries", test_knn_sorted_and_bounded),
        ("k-nearest vs linear scan", test_knn_matches_linear_scan),
        ("Uniform irradiance", test_uniform_irradiance_estimate),
        ("Partial gather", test_partial_gather_uses_max_radius),
        ("Facing-away photons", test_photons_facing_away_are_skipped),
        ("Full gather radius", test_full_gather_uses_kth_distance),
        ("Gather counters", test_add_gathers_counts_events),
        ("Photon records", test_photon_records),
        ("Invalid radius", test_invalid_radius),
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
