"""Small image operations: grayscale, bilinear resize, undistortion."""

from __future__ import annotations

import numpy as np

from .core import PinholeCamera

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    return rgb @ GRAY_WEIGHTS


def _gather_bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample img at fractional pixel-index coordinates with border clamp."""
    h, w = img.shape[:2]
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(sx, np.int64)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(sy, np.int64)
    fx = sx - x0 if w > 1 else np.zeros_like(sx)
    fy = sy - y0 if h > 1 else np.zeros_like(sy)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (new_h, new_w):
        return img.copy()
    ys = (np.arange(new_h) + 0.5) * (h / new_h) - 0.5
    xs = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    sy, sx = np.meshgrid(ys, xs, indexing="ij")
    return _gather_bilinear(img, sx, sy)


def resize_nearest(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (new_h, new_w):
        return img.copy()
    ys = np.minimum(((np.arange(new_h) + 0.5) * (h / new_h)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(new_w) + 0.5) * (w / new_w)).astype(np.int64), w - 1)
    return img[ys[:, None], xs[None, :]]


def distort_normalized(x: np.ndarray, y: np.ndarray, dist: np.ndarray):
    """Apply the 4-coefficient radial-tangential model to ideal coords."""
    k1, k2, p1, p2 = dist
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return xd, yd


def undistort_image(img: np.ndarray, camera: PinholeCamera, nearest: bool = False) -> np.ndarray:
    """Inverse-mapping undistortion: for each rectified output pixel, look up
    the distorted source location and sample."""
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w]
    x = (xs + 0.5 - camera.cx) / camera.fx
    y = (ys + 0.5 - camera.cy) / camera.fy
    xd, yd = distort_normalized(x, y, camera.distortion)
    sx = camera.fx * xd + camera.cx - 0.5
    sy = camera.fy * yd + camera.cy - 0.5
    if nearest:
        ix = np.clip(np.round(sx).astype(np.int64), 0, w - 1)
        iy = np.clip(np.round(sy).astype(np.int64), 0, h - 1)
        return img[iy, ix]
    return _gather_bilinear(img, sx, sy)
