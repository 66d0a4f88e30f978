"""
Photon map
Deposited photon records, a balanced KD-tree over their positions and
adaptive-radius k-nearest gathering.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from services.error_handler import GuidingError

GATHER_K = 4


@dataclass
class Photon:
    position: np.ndarray
    direction: np.ndarray
    flux: np.ndarray
    light_id: int
    first_bounce: np.ndarray
    emission_pdf: float
    gather_count: int = 0


@dataclass
class PhotonMap:
    """
    Struct-of-arrays photon storage plus the KD-tree.

    normal: receiver normal at the deposit, oriented toward the side the photon arrived from
    emission: index of the emission record that produced the photon
    """

    position: np.ndarray
    direction: np.ndarray
    flux: np.ndarray
    normal: np.ndarray
    light_id: np.ndarray
    first_bounce: np.ndarray
    emission_pdf: np.ndarray
    emission: np.ndarray
    gather_count: np.ndarray = field(default=None)
    tree: Optional[cKDTree] = field(default=None, repr=False)

    def __post_init__(self):
        if self.gather_count is None:
            self.gather_count = np.zeros(self.position.shape[0], dtype=np.int64)

    def __len__(self) -> int:
        return int(self.position.shape[0])

    def photon(self, i: int) -> Photon:
        return Photon(
            self.position[i], self.direction[i], self.flux[i], int(self.light_id[i]),
            self.first_bounce[i], float(self.emission_pdf[i]), int(self.gather_count[i]),
        )

    def photons(self) -> List[Photon]:
        return [self.photon(i) for i in range(len(self))]

    @classmethod
    def empty(cls) -> "PhotonMap":
        z3 = np.zeros((0, 3))
        return build_photon_map(z3, z3, z3, z3, np.zeros(0, dtype=np.int64), z3, np.zeros(0), np.zeros(0, dtype=np.int64))


def build_photon_map(
    position: np.ndarray,
    direction: np.ndarray,
    flux: np.ndarray,
    normal: np.ndarray,
    light_id: np.ndarray,
    first_bounce: np.ndarray,
    emission_pdf: np.ndarray,
    emission: np.ndarray,
) -> PhotonMap:
    """Median-split balanced KD-tree over photon positions"""
    position = np.asarray(position, dtype=np.float64).reshape(-1, 3)
    pm = PhotonMap(
        position=position,
        direction=np.asarray(direction, dtype=np.float64).reshape(-1, 3),
        flux=np.asarray(flux, dtype=np.float64).reshape(-1, 3),
        normal=np.asarray(normal, dtype=np.float64).reshape(-1, 3),
        light_id=np.asarray(light_id, dtype=np.int64).reshape(-1),
        first_bounce=np.asarray(first_bounce, dtype=np.float64).reshape(-1, 3),
        emission_pdf=np.asarray(emission_pdf, dtype=np.float64).reshape(-1),
        emission=np.asarray(emission, dtype=np.int64).reshape(-1),
    )
    if len(pm):
        pm.tree = cKDTree(position, balanced_tree=True, compact_nodes=True)
    return pm


def photon_map_from(photons: List[Photon]) -> PhotonMap:
    """Photon map over Photon records (normals taken opposite to the incident direction)"""
    if not photons:
        return PhotonMap.empty()
    pm = build_photon_map(
        [p.position for p in photons],
        [p.direction for p in photons],
        [p.flux for p in photons],
        [-np.asarray(p.direction) for p in photons],
        [p.light_id for p in photons],
        [p.first_bounce for p in photons],
        [p.emission_pdf for p in photons],
        np.arange(len(photons)),
    )
    pm.gather_count = np.array([p.gather_count for p in photons], dtype=np.int64)
    return pm


def knn(pm: PhotonMap, x: np.ndarray, k: int, max_radius: float = np.inf) -> Tuple[np.ndarray, np.ndarray]:
    """min(k, size) nearest photons within max_radius, sorted by distance: (distances, indices)"""
    if len(pm) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    kk = min(k, len(pm))
    dist, idx = pm.tree.query(np.asarray(x, dtype=np.float64).reshape(3), k=kk, distance_upper_bound=max_radius)
    dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
    ok = np.isfinite(dist)
    return dist[ok], idx[ok].astype(np.int64)


@dataclass
class GatherBatch:
    radiance: np.ndarray
    used_radius: np.ndarray
    ids: np.ndarray


def gather_batch(
    pm: PhotonMap,
    points: np.ndarray,
    normals: np.ndarray,
    max_radius: float,
    albedo: np.ndarray,
    n_emitted: int,
    k: int = GATHER_K,
) -> GatherBatch:
    """
    Vectorized gather for P query points.

    ids is (P, k) with -1 in unused slots. Photons whose deposit normal faces away
    from the query normal are skipped.
    """
    if max_radius <= 0.0:
        raise GuidingError("max_radius must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    P = pts.shape[0]
    radiance = np.zeros((P, 3))
    used = np.full(P, float(max_radius))
    ids = np.full((P, k), -1, dtype=np.int64)
    if len(pm) == 0 or P == 0:
        return GatherBatch(radiance, used, ids)

    dist, idx = pm.tree.query(pts, k=k, distance_upper_bound=max_radius)
    dist = dist.reshape(P, k)
    idx = idx.reshape(P, k)
    found = np.isfinite(dist)
    safe = np.where(found, idx, 0)
    facing = np.einsum("pkj,pj->pk", pm.normal[safe], np.asarray(normals, dtype=np.float64).reshape(P, 3)) > 0.0
    ok = found & facing

    count = ok.sum(axis=1)
    far = np.where(ok, dist, 0.0).max(axis=1)
    used = np.where(count >= k, np.maximum(far, max_radius * 1e-9), max_radius)
    flux = np.where(ok[..., None], pm.flux[safe], 0.0).sum(axis=1)
    area = math.pi * used * used
    radiance = flux * np.asarray(albedo, dtype=np.float64).reshape(P, 3) / math.pi / (area * max(n_emitted, 1))[:, None]
    ids = np.where(ok, idx, -1)
    return GatherBatch(radiance, used, ids)


def gather(
    pm: PhotonMap,
    x: np.ndarray,
    normal: np.ndarray,
    max_radius: float,
    albedo=(1.0, 1.0, 1.0),
    n_emitted: int = 1,
    k: int = GATHER_K,
) -> Tuple[np.ndarray, float, List[int]]:
    """(radiance RGB, used_radius, gathered photon ids) at one point"""
    gb = gather_batch(pm, np.reshape(x, (1, 3)), np.reshape(normal, (1, 3)), max_radius,
                      np.reshape(np.asarray(albedo, dtype=np.float64), (1, 3)), n_emitted, k)
    ids = [int(i) for i in gb.ids[0] if i >= 0]
    return gb.radiance[0], float(gb.used_radius[0]), ids


def add_gathers(pm: PhotonMap, ids: np.ndarray) -> None:
    """Increments gather_count once per gather event"""
    flat = np.asarray(ids).reshape(-1)
    flat = flat[flat >= 0]
    np.add.at(pm.gather_count, flat, 1)
