"""Camera, pose, and ray math shared by every other module.

All types here are immutable value objects: arrays are copied on
construction and marked read-only, so instances can be shared freely
between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


def _frozen_array(value, shape, dtype=np.float64) -> np.ndarray:
    arr = np.array(value, dtype=dtype).reshape(shape)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z convention)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(np.dot(q, q)))
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def geodesic_angle(qa: np.ndarray, qb: np.ndarray) -> float:
    """Rotation angle in radians between two unit quaternions."""
    d = abs(float(np.dot(qa, qb)))
    return 2.0 * math.acos(min(1.0, d))


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    quat: np.ndarray  # (4,) unit quaternion (w, x, y, z)
    trans: np.ndarray  # (3,) meters

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.quat, dtype=np.float64).reshape(4))
        object.__setattr__(self, "quat", _frozen_array(q, (4,)))
        object.__setattr__(self, "trans", _frozen_array(self.trans, (3,)))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def rotate(self, vecs: np.ndarray) -> np.ndarray:
        """Rotate vectors (..., 3) from camera into world frame."""
        return np.asarray(vecs) @ self.rotation_matrix().T

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points (..., 3) into the world frame."""
        return self.rotate(points) + self.trans

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.quat)
        return Pose(qi, -(quat_to_matrix(qi) @ self.trans))

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        return Pose(quat_multiply(self.quat, other.quat), self.apply(other.trans))


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: np.ndarray = field(default_factory=lambda: np.zeros(4))  # k1,k2,p1,p2
    rectified: bool = True

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        dist = np.array(self.distortion, dtype=np.float64).reshape(4)
        if self.rectified:
            dist = np.zeros(4)
        object.__setattr__(self, "distortion", _frozen_array(dist, (4,)))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)


def scale_camera(camera: PinholeCamera, fraction: float) -> PinholeCamera:
    """Resize a camera by `fraction`, rescaling intrinsics by the realized
    integer ratio rather than the requested fraction."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    new_w = max(1, int(math.floor(camera.width * fraction)))
    new_h = max(1, int(math.floor(camera.height * fraction)))
    rx = new_w / camera.width
    ry = new_h / camera.height
    return PinholeCamera(
        fx=camera.fx * rx,
        fy=camera.fy * ry,
        cx=camera.cx * rx,
        cy=camera.cy * ry,
        width=new_w,
        height=new_h,
        distortion=camera.distortion,
        rectified=camera.rectified,
    )


# ---------------------------------------------------------------------------
# rays and boxes


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray  # (3,) meters
    direction: np.ndarray  # (3,) unit

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen_array(self.origin, (3,)))
        object.__setattr__(self, "direction", _frozen_array(self.direction, (3,)))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray  # (3,) meters
    hi: np.ndarray  # (3,) meters

    def __post_init__(self):
        object.__setattr__(self, "lo", _frozen_array(self.lo, (3,)))
        object.__setattr__(self, "hi", _frozen_array(self.hi, (3,)))
        if not np.all(self.lo <= self.hi):
            raise ValueError("Aabb min must be <= max component-wise")

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)


def pixel_directions_camera(camera: PinholeCamera, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Unit back-projection directions in the camera frame, pixel-center
    convention (px + 0.5, py + 0.5)."""
    x = (np.asarray(px, dtype=np.float64) + 0.5 - camera.cx) / camera.fx
    y = (np.asarray(py, dtype=np.float64) + 0.5 - camera.cy) / camera.fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_for_pixel(camera: PinholeCamera, pose: Pose, px: float, py: float) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    d = pixel_directions_camera(camera, np.float64(px), np.float64(py))
    return Ray(pose.trans, pose.rotate(d))


def rays_for_pixels(
    camera: PinholeCamera, pose: Pose, px: np.ndarray, py: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized ray construction. Returns (origins (N,3), unit directions (N,3))."""
    dirs = pixel_directions_camera(camera, px, py) @ pose.rotation_matrix().T
    origins = np.broadcast_to(pose.trans, dirs.shape).copy()
    return origins, dirs


def camera_rays(camera: PinholeCamera, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """Rays for every pixel, row-major. Returns (origins (H*W,3), dirs (H*W,3))."""
    py, px = np.mgrid[0 : camera.height, 0 : camera.width]
    return rays_for_pixels(camera, pose, px.ravel(), py.ravel())


def ray_aabb_clip(ray: Ray, box: Aabb) -> Optional[Tuple[float, float]]:
    """Slab-method parameter interval where the ray is inside the box.

    Returns None when the ray misses the box or the box lies entirely
    behind the origin; t_near is clamped to 0 when the origin is inside.
    """
    interval = ray_aabb_clip_batch(
        ray.origin[None, :], ray.direction[None, :], box.lo, box.hi
    )
    t0, t1 = float(interval[0, 0]), float(interval[0, 1])
    if t1 < t0:
        return None
    return (t0, t1)


def ray_aabb_clip_batch(
    origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray
) -> np.ndarray:
    """Vectorized slab clip: (N, 2) array of (t_near, t_far); misses have
    t_far < t_near."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    # Zero direction components: the axis constrains nothing when the origin
    # is inside the slab, everything otherwise.
    zero = dirs == 0.0
    if np.any(zero):
        inside = (origins >= lo) & (origins <= hi)
        tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    t0 = np.maximum(tmin.max(axis=-1), 0.0)
    t1 = tmax.min(axis=-1)
    return np.stack([t0, t1], axis=-1)


# ---------------------------------------------------------------------------
# frames and render products


@dataclass(frozen=True)
class FrameSample:
    """One posed camera observation.

    Depth, when present, is the distance along each pixel ray in meters
    with 0 marking invalid measurements.
    """

    camera_id: str
    seq: int
    timestamp: float
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: Optional[np.ndarray]  # (H, W) meters, 0 = invalid
    pose: Pose
    camera: PinholeCamera

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        if rgb.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(
                f"rgb shape {rgb.shape} does not match camera "
                f"{self.camera.width}x{self.camera.height}"
            )
        rgb = rgb.copy()
        rgb.flags.writeable = False
        object.__setattr__(self, "rgb", rgb)
        if self.depth is not None:
            depth = np.asarray(self.depth, dtype=np.float64)
            if depth.shape != rgb.shape[:2]:
                raise ValueError("depth dimensions must match rgb")
            if not np.all(np.isfinite(depth)):
                raise ValueError("depth must be finite")
            if np.any(depth < 0):
                raise ValueError("negative depth forbidden")
            depth = depth.copy()
            depth.flags.writeable = False
            object.__setattr__(self, "depth", depth)


@dataclass(frozen=True)
class RenderProduct:
    """Rendered RGB + metric depth + accumulated opacity from any backend."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters; background pixels carry the far distance
    opacity: np.ndarray  # (H, W) in [0, 1]
    render_time: float = 0.0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rgb.shape[:2]
