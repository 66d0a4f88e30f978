"""
Scene service
JSON/OBJ scene loading and validation, runtime geometry, lights, camera and
vectorized ray intersection.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from services.error_handler import SceneError, SceneValidationError, get_logger
from services.gmath import orthonormal_basis

logger = get_logger(__name__)

Vec3List = Tuple[float, float, float]

DIFFUSE, MIRROR, DIELECTRIC = 0, 1, 2
_TRI_BLOCK = 64


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CameraSpec(_Spec):
    position: Vec3List
    look_at: Vec3List
    up: Vec3List = (0.0, 1.0, 0.0)
    fov: float = Field(default=45.0, gt=0.0, lt=180.0)
    width: int = Field(default=64, ge=1)
    height: int = Field(default=64, ge=1)


class PointLightSpec(_Spec):
    type: Literal["point"]
    position: Vec3List
    intensity: Vec3List


class RectLightSpec(_Spec):
    type: Literal["rect"]
    corner: Vec3List
    edge_u: Vec3List
    edge_v: Vec3List
    radiance: Vec3List


class DirectionalLightSpec(_Spec):
    type: Literal["directional"]
    direction: Vec3List
    radiance: Vec3List


LightSpec = Annotated[
    Union[PointLightSpec, RectLightSpec, DirectionalLightSpec], Field(discriminator="type")
]


class DiffuseSpec(_Spec):
    name: str
    type: Literal["diffuse"]
    albedo: Vec3List = (0.8, 0.8, 0.8)


class MirrorSpec(_Spec):
    name: str
    type: Literal["mirror"]


class DielectricSpec(_Spec):
    name: str
    type: Literal["dielectric"]
    ior: float = Field(default=1.5, gt=0.0)


MaterialSpec = Annotated[Union[DiffuseSpec, MirrorSpec, DielectricSpec], Field(discriminator="type")]


class SphereSpec(_Spec):
    type: Literal["sphere"]
    center: Vec3List
    radius: float = Field(gt=0.0)
    material: str
    caster: bool = False
    receiver: bool = False


class TriMeshSpec(_Spec):
    type: Literal["tri_mesh"]
    vertices: Optional[List[Vec3List]] = None
    faces: Optional[List[Tuple[int, int, int]]] = None
    obj: Optional[str] = None
    translate: Vec3List = (0.0, 0.0, 0.0)
    scale: float = Field(default=1.0, gt=0.0)
    material: str
    caster: bool = False
    receiver: bool = False


SurfaceSpec = Annotated[Union[SphereSpec, TriMeshSpec], Field(discriminator="type")]


class SceneSpec(_Spec):
    name: str = "scene"
    camera: CameraSpec
    lights: List[LightSpec]
    materials: List[MaterialSpec]
    surfaces: List[SurfaceSpec]


# ---------------------------------------------------------------------------
# Runtime types
# ---------------------------------------------------------------------------


def _unit(v: Sequence[float]) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    return a / np.linalg.norm(a)


@dataclass(frozen=True, eq=False)
class PointLight:
    position: np.ndarray
    intensity: np.ndarray
    kind: str = "point"

    @property
    def power(self) -> float:
        return float(4.0 * math.pi * self.intensity.mean())

    @property
    def center(self) -> np.ndarray:
        return self.position


@dataclass(frozen=True, eq=False)
class RectLight:
    """One-sided rectangle emitting on the side of edge_u x edge_v"""

    corner: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    radiance: np.ndarray
    kind: str = "rect"

    @property
    def normal(self) -> np.ndarray:
        return _unit(np.cross(self.edge_u, self.edge_v))

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))

    @property
    def center(self) -> np.ndarray:
        return self.corner + 0.5 * (self.edge_u + self.edge_v)

    @property
    def power(self) -> float:
        return float(math.pi * self.area * self.radiance.mean())

    def point_at(self, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
        return self.corner + u1[..., None] * self.edge_u + u2[..., None] * self.edge_v


@dataclass(frozen=True, eq=False)
class DirectionalLight:
    """Infinite light travelling along `direction`; radiance is irradiance on a perpendicular plane"""

    direction: np.ndarray
    radiance: np.ndarray
    kind: str = "directional"


Light = Union[PointLight, RectLight, DirectionalLight]


@dataclass
class Camera:
    position: np.ndarray
    forward: np.ndarray
    right: np.ndarray
    up: np.ndarray
    fov: float
    width: int
    height: int

    @classmethod
    def from_spec(cls, spec: CameraSpec) -> "Camera":
        pos = np.asarray(spec.position, dtype=np.float64)
        fwd = _unit(np.subtract(spec.look_at, spec.position))
        right = np.cross(fwd, _unit(spec.up))
        if np.linalg.norm(right) < 1e-12:
            right, _ = orthonormal_basis(fwd)
        right = _unit(right)
        up = np.cross(right, fwd)
        return cls(pos, fwd, right, up, float(spec.fov), int(spec.width), int(spec.height))

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def generate_rays(self, jitter: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        One ray per pixel in row-major order (row 0 at the top).
        jitter: (P, 2) offsets in [0, 1) inside each pixel; pixel centres when None.
        """
        ys, xs = np.divmod(np.arange(self.num_pixels), self.width)
        off = np.full((self.num_pixels, 2), 0.5) if jitter is None else jitter
        sx = (xs + off[:, 0]) / self.width * 2.0 - 1.0
        sy = 1.0 - (ys + off[:, 1]) / self.height * 2.0
        tan_half = math.tan(math.radians(self.fov) * 0.5)
        aspect = self.width / self.height
        d = (
            self.forward[None, :]
            + (sx * tan_half * aspect)[:, None] * self.right[None, :]
            + (sy * tan_half)[:, None] * self.up[None, :]
        )
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(self.position, d.shape).copy(), d


@dataclass
class Hits:
    """Closest hits of a ray batch; `surface` is -1 on a miss"""

    hit: np.ndarray
    t: np.ndarray
    surface: np.ndarray
    position: np.ndarray
    normal: np.ndarray


class Scene:
    """
    Runtime scene: triangles and spheres tagged with a surface id, per-surface
    material and caster/receiver flags, lights, camera and bounding sphere.
    """

    def __init__(
        self,
        spec: SceneSpec,
        triangles: np.ndarray,
        tri_surface: np.ndarray,
        spheres: np.ndarray,
        sphere_surface: np.ndarray,
        source_dir: Optional[Path] = None,
    ):
        self.spec = spec
        self.source_dir = source_dir
        self.name = spec.name

        names = [m.name for m in spec.materials]
        self.material_kind = np.array(
            [{"diffuse": DIFFUSE, "mirror": MIRROR, "dielectric": DIELECTRIC}[m.type] for m in spec.materials],
            dtype=np.int64,
        )
        self.albedo = np.array(
            [m.albedo if isinstance(m, DiffuseSpec) else (0.0, 0.0, 0.0) for m in spec.materials]
        ).reshape(-1, 3)
        self.ior = np.array([m.ior if isinstance(m, DielectricSpec) else 1.0 for m in spec.materials])

        self.surface_material = np.array([names.index(s.material) for s in spec.surfaces], dtype=np.int64)
        self.is_caster = np.array([s.caster for s in spec.surfaces], dtype=bool)
        self.is_receiver = np.array([s.receiver for s in spec.surfaces], dtype=bool)

        tri = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        self.tri_v0 = tri[:, 0]
        self.tri_e1 = tri[:, 1] - tri[:, 0]
        self.tri_e2 = tri[:, 2] - tri[:, 0]
        cross = np.cross(self.tri_e1, self.tri_e2)
        self.tri_area = 0.5 * np.linalg.norm(cross, axis=1)
        self.tri_normal = cross / np.maximum(2.0 * self.tri_area, 1e-300)[:, None]
        self.tri_surface = np.asarray(tri_surface, dtype=np.int64)

        sph = np.asarray(spheres, dtype=np.float64).reshape(-1, 4)
        self.sphere_center = sph[:, :3]
        self.sphere_radius = sph[:, 3]
        self.sphere_surface = np.asarray(sphere_surface, dtype=np.int64)

        self.lights: List[Light] = [_build_light(ls) for ls in spec.lights]
        self.camera = Camera.from_spec(spec.camera)
        self.center, self.radius = self._bounding_sphere()
        self.eps = 1e-6 * max(self.radius, 1e-3)

    # -- geometry bookkeeping ----------------------------------------------

    @property
    def num_surfaces(self) -> int:
        return int(self.surface_material.size)

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    @property
    def caster_ids(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.is_caster)]

    def surface_kind(self, surface: np.ndarray) -> np.ndarray:
        return self.material_kind[self.surface_material[surface]]

    def surface_area(self, sid: int) -> float:
        tri = self.tri_area[self.tri_surface == sid].sum()
        sph = (4.0 * math.pi * self.sphere_radius[self.sphere_surface == sid] ** 2).sum()
        return float(tri + sph)

    def surface_aabb(self, sid: int) -> Tuple[np.ndarray, np.ndarray]:
        pts = []
        mask = self.tri_surface == sid
        if np.any(mask):
            v0 = self.tri_v0[mask]
            pts.extend([v0, v0 + self.tri_e1[mask], v0 + self.tri_e2[mask]])
        smask = self.sphere_surface == sid
        if np.any(smask):
            c, r = self.sphere_center[smask], self.sphere_radius[smask, None]
            pts.extend([c - r, c + r])
        allp = np.concatenate(pts)
        return allp.min(axis=0), allp.max(axis=0)

    def sample_surface(self, sid: int, n: int, rng: np.random.Generator) -> np.ndarray:
        """n points on surface sid, uniform by area"""
        tmask = np.flatnonzero(self.tri_surface == sid)
        smask = np.flatnonzero(self.sphere_surface == sid)
        areas = np.concatenate([self.tri_area[tmask], 4.0 * math.pi * self.sphere_radius[smask] ** 2])
        cdf = np.cumsum(areas)
        pick = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), areas.size - 1)
        u1, u2 = rng.random(n), rng.random(n)
        out = np.empty((n, 3))

        is_tri = pick < tmask.size
        if np.any(is_tri):
            k = tmask[pick[is_tri]]
            su = np.sqrt(u1[is_tri])
            b1, b2 = su * (1.0 - u2[is_tri]), su * u2[is_tri]
            out[is_tri] = self.tri_v0[k] + b1[:, None] * self.tri_e1[k] + b2[:, None] * self.tri_e2[k]
        if np.any(~is_tri):
            k = smask[pick[~is_tri] - tmask.size]
            z = 1.0 - 2.0 * u1[~is_tri]
            r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
            phi = 2.0 * math.pi * u2[~is_tri]
            dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
            out[~is_tri] = self.sphere_center[k] + self.sphere_radius[k, None] * dirs
        return out

    def _bounding_sphere(self) -> Tuple[np.ndarray, float]:
        pts = [self.tri_v0, self.tri_v0 + self.tri_e1, self.tri_v0 + self.tri_e2]
        r = self.sphere_radius[:, None]
        pts += [self.sphere_center - r, self.sphere_center + r]
        for light in self.lights:
            if isinstance(light, PointLight):
                pts.append(light.position[None, :])
            elif isinstance(light, RectLight):
                pts.append(np.stack([light.corner, light.corner + light.edge_u, light.corner + light.edge_v,
                                     light.corner + light.edge_u + light.edge_v]))
        allp = np.concatenate([p.reshape(-1, 3) for p in pts if p.size])
        lo, hi = allp.min(axis=0), allp.max(axis=0)
        center = 0.5 * (lo + hi)
        radius = float(np.linalg.norm(allp - center, axis=1).max())
        if self.sphere_radius.size:
            radius = max(radius, float((np.linalg.norm(self.sphere_center - center, axis=1) + self.sphere_radius).max()))
        return center, max(radius * (1.0 + 1e-6), 1e-6)

    # -- ray queries --------------------------------------------------------

    def intersect(self, origins: np.ndarray, dirs: np.ndarray, tmax: Optional[np.ndarray] = None) -> Hits:
        """Closest hit per ray, brute force over triangles (in blocks) and spheres"""
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        n = o.shape[0]
        best = np.full(n, np.inf) if tmax is None else np.array(tmax, dtype=np.float64).reshape(n)
        surface = np.full(n, -1, dtype=np.int64)
        normal = np.zeros((n, 3))
        tmin = self.eps

        for start in range(0, self.tri_v0.shape[0], _TRI_BLOCK):
            sl = slice(start, start + _TRI_BLOCK)
            v0, e1, e2 = self.tri_v0[sl], self.tri_e1[sl], self.tri_e2[sl]
            p = np.cross(d[:, None, :], e2[None, :, :])
            det = np.einsum("kj,nkj->nk", e1, p)
            ok = np.abs(det) > 1e-14
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            s = o[:, None, :] - v0[None, :, :]
            u = np.einsum("nkj,nkj->nk", s, p) * inv
            q = np.cross(s, e1[None, :, :])
            v = np.einsum("nj,nkj->nk", d, q) * inv
            t = np.einsum("kj,nkj->nk", e2, q) * inv
            valid = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > tmin)
            t = np.where(valid, t, np.inf)
            k = np.argmin(t, axis=1)
            tk = t[np.arange(n), k]
            closer = tk < best
            if np.any(closer):
                best[closer] = tk[closer]
                idx = start + k[closer]
                surface[closer] = self.tri_surface[idx]
                normal[closer] = self.tri_normal[idx]

        for j in range(self.sphere_center.shape[0]):
            oc = o - self.sphere_center[j]
            b = np.einsum("nj,nj->n", oc, d)
            c = np.einsum("nj,nj->n", oc, oc) - self.sphere_radius[j] ** 2
            disc = b * b - c
            has = disc >= 0.0
            sq = np.sqrt(np.where(has, disc, 0.0))
            t1, t2 = -b - sq, -b + sq
            t = np.where(t1 > tmin, t1, np.where(t2 > tmin, t2, np.inf))
            t = np.where(has, t, np.inf)
            closer = t < best
            if np.any(closer):
                best[closer] = t[closer]
                surface[closer] = self.sphere_surface[j]
                hp = o[closer] + t[closer, None] * d[closer]
                normal[closer] = (hp - self.sphere_center[j]) / self.sphere_radius[j]

        hit = surface >= 0
        pos = o + np.where(hit, best, 0.0)[:, None] * d
        return Hits(hit=hit, t=np.where(hit, best, np.inf), surface=surface, position=pos, normal=normal)

    def occluded(self, origins: np.ndarray, dirs: np.ndarray, dist: np.ndarray) -> np.ndarray:
        """True where anything lies strictly between origin and origin + dist * dir"""
        hits = self.intersect(origins, dirs, tmax=np.asarray(dist) * (1.0 - 1e-7) - self.eps)
        return hits.hit

    def offset(self, p: np.ndarray, n: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Ray origin nudged off the surface toward the side `d` leaves from"""
        side = np.sign(np.einsum("nj,nj->n", d, n))
        side = np.where(side == 0.0, 1.0, side)
        return p + (self.eps * 10.0) * side[:, None] * n


def _build_light(spec) -> Light:
    if isinstance(spec, PointLightSpec):
        return PointLight(np.asarray(spec.position, float), np.asarray(spec.intensity, float))
    if isinstance(spec, RectLightSpec):
        return RectLight(
            np.asarray(spec.corner, float),
            np.asarray(spec.edge_u, float),
            np.asarray(spec.edge_v, float),
            np.asarray(spec.radiance, float),
        )
    return DirectionalLight(_unit(spec.direction), np.asarray(spec.radiance, float))


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def parse_obj(text: str, path: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    """`v` and `f` lines of an OBJ file; polygons are fan-triangulated, other records ignored"""
    verts: List[List[float]] = []
    faces: List[Tuple[int, int, int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError as e:
                raise SceneError(f"bad vertex: {e}", line=lineno, column=1, path=path) from e
            if len(verts[-1]) != 3:
                raise SceneError("vertex needs 3 coordinates", line=lineno, column=1, path=path)
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                try:
                    i = int(tok.split("/")[0])
                except ValueError as e:
                    col = line.find(tok) + 1
                    raise SceneError(f"bad face index '{tok}'", line=lineno, column=col, path=path) from e
                i = i - 1 if i > 0 else len(verts) + i
                if not 0 <= i < len(verts):
                    col = line.find(tok) + 1
                    raise SceneError(f"face index {tok} out of range", line=lineno, column=col, path=path)
                idx.append(i)
            if len(idx) < 3:
                raise SceneError("face needs at least 3 vertices", line=lineno, column=1, path=path)
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _validate(spec: SceneSpec) -> None:
    if not spec.lights:
        raise SceneValidationError("at_least_one_light", "scene defines no lights")
    if not any(s.receiver for s in spec.surfaces):
        raise SceneValidationError("at_least_one_receiver", "no surface is flagged as receiver")
    names = [m.name for m in spec.materials]
    if len(set(names)) != len(names):
        raise SceneValidationError("unique_material_names", "material names must be unique")
    for i, s in enumerate(spec.surfaces):
        if s.material not in names:
            raise SceneValidationError("material_reference", f"surface {i} references unknown material '{s.material}'")
        if isinstance(s, TriMeshSpec) and (s.obj is None) == (s.vertices is None):
            raise SceneValidationError("mesh_source", f"surface {i} needs exactly one of inline vertices or obj")
        if isinstance(s, TriMeshSpec) and s.vertices is not None and not s.faces:
            raise SceneValidationError("mesh_source", f"surface {i} has inline vertices but no faces")
    for i, light in enumerate(spec.lights):
        if isinstance(light, RectLightSpec) and np.linalg.norm(np.cross(light.edge_u, light.edge_v)) <= 0.0:
            raise SceneValidationError("light_geometry", f"rect light {i} has zero area")
        if isinstance(light, DirectionalLightSpec) and np.linalg.norm(light.direction) <= 0.0:
            raise SceneValidationError("light_geometry", f"directional light {i} has no direction")


def build_scene(spec: SceneSpec, source_dir: Optional[Path] = None) -> Scene:
    """Validates a parsed spec and resolves meshes into a runtime Scene"""
    _validate(spec)
    tris, tri_sid, sph, sph_sid = [], [], [], []
    for sid, s in enumerate(spec.surfaces):
        if isinstance(s, SphereSpec):
            sph.append([*s.center, s.radius])
            sph_sid.append(sid)
            continue
        if s.obj is not None:
            obj_path = (source_dir or Path(".")) / s.obj
            try:
                text = obj_path.read_text(encoding="utf-8")
            except OSError as e:
                raise SceneError(f"cannot read mesh: {e}", path=str(obj_path)) from e
            verts, faces = parse_obj(text, path=str(obj_path))
        else:
            verts = np.asarray(s.vertices, dtype=np.float64)
            faces = np.asarray(s.faces, dtype=np.int64)
            if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
                raise SceneValidationError("mesh_source", f"surface {sid} has a face index out of range")
        if len(faces) == 0:
            raise SceneValidationError("mesh_source", f"surface {sid} has no triangles")
        verts = verts * s.scale + np.asarray(s.translate)
        tris.append(verts[faces])
        tri_sid.append(np.full(len(faces), sid))
    scene = Scene(
        spec,
        np.concatenate(tris) if tris else np.zeros((0, 3, 3)),
        np.concatenate(tri_sid) if tri_sid else np.zeros(0, dtype=np.int64),
        np.array(sph, dtype=np.float64).reshape(-1, 4),
        np.array(sph_sid, dtype=np.int64),
        source_dir=source_dir,
    )
    logger.info(
        f"Scene '{scene.name}': {scene.tri_v0.shape[0]} triangles, {scene.sphere_radius.size} spheres, "
        f"{len(scene.lights)} lights, bounding radius {scene.radius:.4g}"
    )
    return scene


def parse_scene(text: str, path: Optional[str] = None, source_dir: Optional[Path] = None) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneError(e.msg, line=e.lineno, column=e.colno, path=path) from e
    try:
        spec = SceneSpec.model_validate(doc)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first.get("loc", ()))
        raise SceneValidationError("schema", f"{loc}: {first.get('msg')}") from e
    return build_scene(spec, source_dir)


def load_scene(path: Union[str, Path]) -> Scene:
    """
    Loads a scene file.

    Raises:
        SceneError: unreadable file or malformed JSON/OBJ (with line and column)
        SceneValidationError: schema or invariant violation, naming the invariant
    """
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise SceneError(f"cannot read scene: {e}", path=str(p)) from e
    return parse_scene(text, path=str(p), source_dir=p.parent)


def serialize_scene(scene: Union[Scene, SceneSpec]) -> str:
    spec = scene.spec if isinstance(scene, Scene) else scene
    return json.dumps(spec.model_dump(mode="json", exclude_none=True), indent=2)
