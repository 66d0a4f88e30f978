"""
Image I/O and image metrics
PFM (linear HDR) and binary PPM (preview) files, gamma tonemapping, MSE and SSIM.
"""

import re
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy import ndimage

from services.error_handler import ImageError

PathLike = Union[str, Path]

GAMMA = 2.2
LUMA = np.array([0.2126, 0.7152, 0.0722])
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11x11 window at sigma 1.5
PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def _as_rgb(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ImageError(f"Expected an (H, W, 3) image, got shape {a.shape}")
    return a


def write_pfm(path: PathLike, img: np.ndarray) -> None:
    """Little-endian float32 PFM; rows are stored bottom to top"""
    a = _as_rgb(img).astype("<f4")
    h, w, _ = a.shape
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"PF", b"Pf"):
        raise ImageError(f"{path}: not a PFM file")
    color = parts[0].strip() == b"PF"
    try:
        w, h = (int(x) for x in parts[1].split())
        scale = float(parts[2])
    except ValueError as e:
        raise ImageError(f"{path}: malformed PFM header") from e
    dtype = "<f4" if scale < 0 else ">f4"
    ch = 3 if color else 1
    body = np.frombuffer(parts[3], dtype=dtype)
    if body.size != w * h * ch:
        raise ImageError(f"{path}: expected {w * h * ch} samples, found {body.size}")
    img = body.reshape(h, w, ch)[::-1].astype(np.float64)
    return img if color else np.repeat(img, 3, axis=2)


def tonemap(img: np.ndarray, exposure: float = 1.0) -> np.ndarray:
    """Exposure scale then gamma 2.2, quantized to 8 bits"""
    a = np.clip(_as_rgb(img) * exposure, 0.0, 1.0)
    return np.round(255.0 * a ** (1.0 / GAMMA)).astype(np.uint8)


def write_ppm(path: PathLike, img8: np.ndarray) -> None:
    a = np.asarray(img8)
    if a.dtype != np.uint8 or a.ndim != 3 or a.shape[2] != 3:
        raise ImageError("PPM output needs an (H, W, 3) uint8 image")
    h, w, _ = a.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(a).tobytes())


def read_ppm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    m = PPM_HEADER.match(data)
    if m is None:
        raise ImageError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageError(f"{path}: only 8-bit PPM is supported")
    body = np.frombuffer(data[m.end():], dtype=np.uint8)[: w * h * 3]
    if body.size != w * h * 3:
        raise ImageError(f"{path}: truncated pixel data")
    return body.reshape(h, w, 3)


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _as_rgb(a), _as_rgb(b)
    if a.shape != b.shape:
        raise ImageError(f"Image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def mse(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean squared error over linear RGB"""
    a, b = _check_pair(img_a, img_b)
    return float(np.mean((a - b) ** 2))


def luma(img: np.ndarray) -> np.ndarray:
    return _as_rgb(img) @ LUMA


def ssim(img_a: np.ndarray, img_b: np.ndarray, data_range: float = 1.0) -> float:
    """
    Mean SSIM of the luma channels with an 11x11 Gaussian window (sigma 1.5),
    K1 = 0.01, K2 = 0.03, population covariances, borders of the window radius cropped.
    """
    a, b = _check_pair(img_a, img_b)
    x, y = luma(a), luma(b)
    filt = lambda z: ndimage.gaussian_filter(z, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")  # noqa: E731
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return float(s.mean())
