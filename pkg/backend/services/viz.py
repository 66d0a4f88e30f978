"""
Visualization
Equirectangular heatmaps of directional densities, splatted spatial mixtures over
a scene wireframe, and the per-pixel search-radius heatmap.
"""

import math
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from services.error_handler import get_logger
from services.gmath import GaussianMixture, directional_pdf_mixture
from services.image_io import write_ppm
from services.scene import DirectionalLight, Scene

logger = get_logger(__name__)

PathLike = Union[str, Path]
WIRE_COLOR = np.array([90, 90, 90], dtype=np.uint8)


def equirect_directions(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pixel-centre directions of an equirectangular grid (row 0 = +z pole) and the
    solid angle of each pixel; both shaped (height, width, ...).
    """
    theta_edges = np.linspace(0.0, math.pi, height + 1)
    theta = 0.5 * (theta_edges[:-1] + theta_edges[1:])
    phi = (np.arange(width) + 0.5) * (2.0 * math.pi / width)
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    dirs = np.stack([st * np.cos(phi), st * np.sin(phi), np.broadcast_to(ct, (height, width))], axis=-1)
    band = np.cos(theta_edges[:-1]) - np.cos(theta_edges[1:])
    solid = np.broadcast_to((band * 2.0 * math.pi / width)[:, None], (height, width))
    return dirs, solid


def directional_heatmap(
    pdf: Callable[[np.ndarray], np.ndarray], width: int = 128, height: int = 64
) -> Tuple[np.ndarray, np.ndarray]:
    """(densities, pixel solid angles) of pdf over the equirectangular grid"""
    dirs, solid = equirect_directions(width, height)
    vals = pdf(dirs.reshape(-1, 3)).reshape(height, width)
    return vals, solid


def heatmap_integral(values: np.ndarray, solid: np.ndarray) -> float:
    return float(np.sum(values * solid))


def heat_colors(values: np.ndarray, vmax: Optional[float] = None) -> np.ndarray:
    """black -> red -> yellow -> white"""
    v = np.asarray(values, dtype=np.float64)
    top = vmax if vmax is not None else (float(np.nanmax(v)) if np.any(np.isfinite(v)) else 1.0)
    t = np.clip(np.nan_to_num(v / top if top > 0 else v * 0.0), 0.0, 1.0) * 3.0
    rgb = np.stack([np.clip(t, 0, 1), np.clip(t - 1.0, 0, 1), np.clip(t - 2.0, 0, 1)], axis=-1)
    return np.round(255.0 * rgb).astype(np.uint8)


def radius_heatmap(radius: np.ndarray, max_radius: float) -> np.ndarray:
    """Green for large search radii, red for small, black where nothing was gathered"""
    r = np.asarray(radius, dtype=np.float64)
    t = np.clip(np.nan_to_num(r / max_radius, nan=0.0), 0.0, 1.0)
    rgb = np.stack([1.0 - t, t, np.zeros_like(t)], axis=-1)
    rgb[~np.isfinite(r)] = 0.0
    return np.round(255.0 * rgb).astype(np.uint8)


def project(scene: Scene, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel (column, row) of world points and their camera depth; depth <= 0 is behind"""
    cam = scene.camera
    v = np.atleast_2d(points) - cam.position
    depth = v @ cam.forward
    tan_half = math.tan(math.radians(cam.fov) * 0.5)
    aspect = cam.width / cam.height
    safe = np.where(depth > 1e-12, depth, 1e-12)
    sx = (v @ cam.right) / (safe * tan_half * aspect)
    sy = (v @ cam.up) / (safe * tan_half)
    col = (sx + 1.0) * 0.5 * cam.width
    row = (1.0 - sy) * 0.5 * cam.height
    return col, row, depth


def _plot(img: np.ndarray, col: np.ndarray, row: np.ndarray, depth: np.ndarray, color: np.ndarray) -> None:
    h, w, _ = img.shape
    c, r = np.floor(col).astype(np.int64), np.floor(row).astype(np.int64)
    ok = (depth > 0.0) & (c >= 0) & (c < w) & (r >= 0) & (r < h)
    img[r[ok], c[ok]] = color


def wireframe(scene: Scene, steps: int = 48) -> np.ndarray:
    """Triangle edges and sphere outlines drawn from the scene camera"""
    cam = scene.camera
    img = np.zeros((cam.height, cam.width, 3), dtype=np.uint8)
    s = np.linspace(0.0, 1.0, steps)[:, None]
    v0, v1, v2 = scene.tri_v0, scene.tri_v0 + scene.tri_e1, scene.tri_v0 + scene.tri_e2
    for a, b in ((v0, v1), (v1, v2), (v2, v0)):
        pts = (a[None, :, :] * (1.0 - s[..., None]) + b[None, :, :] * s[..., None]).reshape(-1, 3)
        _plot(img, *project(scene, pts), WIRE_COLOR)
    phi = np.linspace(0.0, 2.0 * math.pi, 4 * steps, endpoint=False)
    for c, r in zip(scene.sphere_center, scene.sphere_radius):
        pts = c + r * (np.cos(phi)[:, None] * cam.right + np.sin(phi)[:, None] * cam.up)
        _plot(img, *project(scene, pts), WIRE_COLOR)
    return img


def splat_mixture(scene: Scene, mixture: GaussianMixture, base: Optional[np.ndarray] = None) -> np.ndarray:
    """Each component as a Gaussian disc of its projected sigma, intensity by weight"""
    cam = scene.camera
    img = wireframe(scene) if base is None else base.copy()
    col, row, depth = project(scene, mixture.means)
    tan_half = math.tan(math.radians(cam.fov) * 0.5)
    yy, xx = np.mgrid[0 : cam.height, 0 : cam.width] + 0.5
    acc = np.zeros((cam.height, cam.width))
    for i in np.flatnonzero(depth > 0.0):
        rad = max(mixture.sigmas[i] / (depth[i] * tan_half) * 0.5 * cam.height, 0.75)
        d2 = (xx - col[i]) ** 2 + (yy - row[i]) ** 2
        acc += mixture.weights[i] * np.exp(-0.5 * d2 / (rad * rad))
    disc = heat_colors(acc).astype(np.int64)
    return np.clip(np.maximum(img.astype(np.int64), disc), 0, 255).astype(np.uint8)


def observation_point(scene: Scene, light_id: int) -> np.ndarray:
    light = scene.lights[light_id]
    if isinstance(light, DirectionalLight):
        return scene.center - scene.radius * light.direction
    return np.asarray(light.center, dtype=np.float64)


def viz_distribution(
    scene: Scene,
    light_id: int,
    mixture: GaussianMixture,
    output: PathLike,
    observer: Optional[np.ndarray] = None,
    width: int = 256,
    height: int = 128,
) -> Dict[str, object]:
    """
    Writes <output>_directional.ppm (equirectangular pdf seen from the light or
    `observer`) and <output>_spatial.ppm (splatted mixture over the wireframe).
    """
    out = Path(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    x0 = observation_point(scene, light_id) if observer is None else np.asarray(observer, dtype=np.float64)
    vals, solid = directional_heatmap(lambda w: directional_pdf_mixture(mixture, x0, w), width, height)
    dir_path = out.with_name(out.name + "_directional.ppm")
    spatial_path = out.with_name(out.name + "_spatial.ppm")
    write_ppm(dir_path, heat_colors(vals))
    write_ppm(spatial_path, splat_mixture(scene, mixture))
    integral = heatmap_integral(vals, solid)
    logger.info(f"Light {light_id}: wrote {dir_path.name} and {spatial_path.name} (integral {integral:.4f})")
    return {"directional": dir_path, "spatial": spatial_path, "integral": integral}
