"""Analytic ray-traced RGBD generator for parametric scenes.

Shading is a single directional lambertian light plus an optional
emissive term; "glossy" surfaces add a view-dependent emissive lobe
max(0, v . gloss_dir)^8 to exercise view dependence at toy scale. Depth
is the hit distance along the (unit) pixel ray, 0 where rays miss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import Aabb, FrameSample, PinholeCamera, Pose, camera_rays
from .sessionlog import DEFAULT_DEPTH_SCALE, SessionWriter

_MISS = np.inf
_EPS = 1e-9

GLOSS_EXPONENT = 8.0


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Material:
    diffuse: Tuple[float, float, float]
    emissive: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gloss: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gloss_dir: Tuple[float, float, float] = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    material: Material

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class BoxPrim:
    box: Aabb
    material: Material


@dataclass(frozen=True)
class PlanePrim:
    point: Tuple[float, float, float]
    normal: Tuple[float, float, float]
    material: Material


Primitive = Union[Sphere, BoxPrim, PlanePrim]


@dataclass(frozen=True)
class SceneSpec:
    primitives: Tuple[Primitive, ...]
    background: Tuple[float, float, float]
    light_dir: Tuple[float, float, float]  # unit, pointing toward the light

    def __post_init__(self):
        object.__setattr__(self, "light_dir", tuple(_unit(self.light_dir)))


def _intersect_sphere(origin, dirs, sphere: Sphere):
    oc = origin - np.asarray(sphere.center)
    b = dirs @ oc
    c = oc @ oc - sphere.radius**2
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, _MISS))
    t = np.where(hit, t, _MISS)
    pts = origin + t[:, None] * dirs
    normals = (pts - np.asarray(sphere.center)) / sphere.radius
    return t, normals


def _intersect_box(origin, dirs, prim: BoxPrim):
    lo = prim.box.lo
    hi = prim.box.hi
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origin) * inv
        tb = (hi - origin) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    zero = dirs == 0.0
    if np.any(zero):
        inside = (origin >= lo) & (origin <= hi)
        tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    t0 = tmin.max(axis=-1)
    t1 = tmax.min(axis=-1)
    hit = (t1 >= t0) & (t1 > _EPS)
    t = np.where(t0 > _EPS, t0, t1)
    t = np.where(hit, t, _MISS)
    # face normal: the axis whose slab time equals the hit time; the
    # viewer-facing normal opposes the ray on that axis in both the
    # entering and the interior-exit case
    entering = t0 > _EPS
    axis_t = np.where(entering[:, None], tmin, tmax)
    diff = np.abs(axis_t - t[:, None])
    axis = np.argmin(diff, axis=-1)
    sign = np.where(np.take_along_axis(dirs, axis[:, None], axis=1)[:, 0] > 0, -1.0, 1.0)
    normals = np.zeros_like(dirs)
    normals[np.arange(len(axis)), axis] = sign
    return t, normals


def _intersect_plane(origin, dirs, prim: PlanePrim):
    n = _unit(prim.normal)
    denom = dirs @ n
    num = (np.asarray(prim.point) - origin) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    t = np.where((np.abs(denom) > _EPS) & (t > _EPS), t, _MISS)
    normals = np.where((denom < 0)[:, None], n, -n) * np.ones_like(dirs)
    return t, normals


def _shade(mat: Material, normals, dirs, light_dir) -> np.ndarray:
    lam = np.maximum(0.0, normals @ np.asarray(light_dir))
    rgb = lam[:, None] * np.asarray(mat.diffuse)
    rgb = rgb + np.asarray(mat.emissive)
    gloss = np.asarray(mat.gloss)
    if np.any(gloss > 0):
        v = np.maximum(0.0, (-dirs) @ _unit(mat.gloss_dir))
        rgb = rgb + (v**GLOSS_EXPONENT)[:, None] * gloss
    return np.clip(rgb, 0.0, 1.0)


def trace_rays(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Nearest-hit trace. Returns (rgb (N,3), depth (N,), miss depth 0)."""
    n = dirs.shape[0]
    best_t = np.full(n, _MISS)
    rgb = np.empty((n, 3))
    rgb[:] = scene.background
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            t, normals = _intersect_sphere(origin, dirs, prim)
        elif isinstance(prim, BoxPrim):
            t, normals = _intersect_box(origin, dirs, prim)
        else:
            t, normals = _intersect_plane(origin, dirs, prim)
        closer = t < best_t
        if not np.any(closer):
            continue
        shaded = _shade(prim.material, normals[closer], dirs[closer], scene.light_dir)
        rgb[closer] = shaded
        best_t = np.where(closer, t, best_t)
    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return rgb, depth


def trace_frame(
    scene: SceneSpec,
    camera: PinholeCamera,
    pose: Pose,
    camera_id: str = "cam0",
    seq: int = 0,
    timestamp: float = 0.0,
    with_depth: bool = True,
) -> FrameSample:
    if not camera.rectified:
        raise ValueError("trace_frame requires a rectified camera")
    origins, dirs = camera_rays(camera, pose)
    rgb, depth = trace_rays(scene, pose.trans, dirs)
    h, w = camera.height, camera.width
    return FrameSample(
        camera_id=camera_id,
        seq=seq,
        timestamp=timestamp,
        rgb=rgb.reshape(h, w, 3),
        depth=depth.reshape(h, w) if with_depth else None,
        pose=pose,
        camera=camera,
    )


# ---------------------------------------------------------------------------
# trajectories


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        return np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    i = int(np.argmax(np.diag(m)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = math.sqrt(max(1e-12, 1.0 + m[i, i] - m[j, j] - m[k, k])) * 2
    q = np.empty(4)
    q[0] = (m[k, j] - m[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (m[j, i] + m[i, j]) / s
    q[1 + k] = (m[k, i] + m[i, k]) / s
    return q


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose with +z toward target and +y pointing image-down."""
    eye = np.asarray(eye, dtype=np.float64)
    z = _unit(np.asarray(target, dtype=np.float64) - eye)
    w = _unit(up)
    if abs(float(z @ w)) > 0.999:
        w = np.array([0.0, 1.0, 0.0])
    x = _unit(np.cross(z, w))
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return Pose(_matrix_to_quat(rot), eye)


@dataclass(frozen=True)
class OrbitTrajectory:
    center: Tuple[float, float, float]
    radius: float
    height: float  # absolute camera z
    n_frames: int
    look_at: Tuple[float, float, float]
    camera: PinholeCamera

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")

    def poses(self) -> List[Pose]:
        out = []
        for i in range(self.n_frames):
            a = 2.0 * math.pi * i / self.n_frames
            eye = (
                self.center[0] + self.radius * math.cos(a),
                self.center[1] + self.radius * math.sin(a),
                self.height,
            )
            out.append(look_at_pose(eye, self.look_at))
        return out


@dataclass(frozen=True)
class RasterScanTrajectory:
    """Front-facing sweep over a rows x cols grid spanned by four corner
    positions (top-left, top-right, bottom-left, bottom-right)."""

    corners: Tuple[Tuple[float, float, float], ...]
    rows: int
    cols: int
    look_at: Tuple[float, float, float]
    camera: PinholeCamera

    def __post_init__(self):
        if len(self.corners) != 4:
            raise ValueError("raster scan needs 4 corner positions")
        if self.rows * self.cols < 1:
            raise ValueError("grid must contain at least one pose")

    def poses(self) -> List[Pose]:
        tl, tr, bl, br = (np.asarray(c, dtype=np.float64) for c in self.corners)
        out = []
        for r in range(self.rows):
            fr = r / max(1, self.rows - 1)
            left = tl + fr * (bl - tl)
            right = tr + fr * (br - tr)
            for c in range(self.cols):
                fc = c / max(1, self.cols - 1)
                out.append(look_at_pose(left + fc * (right - left), self.look_at))
        return out

    @property
    def n_frames(self) -> int:
        return self.rows * self.cols


Trajectory = Union[OrbitTrajectory, RasterScanTrajectory]


def generate_session(
    scene: SceneSpec,
    trajectory: Trajectory,
    out_dir,
    with_depth: bool = True,
    depth_scale: float = DEFAULT_DEPTH_SCALE,
    fps: float = 10.0,
) -> Path:
    """Trace the trajectory and write a session log; byte-deterministic
    for identical specs."""
    cam = trajectory.camera
    writer = SessionWriter(out_dir, [("cam0", cam, with_depth)], depth_scale=depth_scale)
    for i, pose in enumerate(trajectory.poses()):
        frame = trace_frame(
            scene, cam, pose, camera_id="cam0", seq=i, timestamp=i / fps, with_depth=with_depth
        )
        writer.add_frame(frame)
    return writer.finish()


# ---------------------------------------------------------------------------
# JSON spec parsing (CLI `gen` input)


def _material_from_json(d: dict) -> Material:
    return Material(
        diffuse=tuple(d["diffuse"]),
        emissive=tuple(d.get("emissive", (0.0, 0.0, 0.0))),
        gloss=tuple(d.get("gloss", (0.0, 0.0, 0.0))),
        gloss_dir=tuple(d.get("gloss_dir", (0.0, 0.0, 1.0))),
    )


def scene_from_json(d: dict) -> SceneSpec:
    prims: List[Primitive] = []
    for p in d["primitives"]:
        mat = _material_from_json(p)
        kind = p["kind"]
        if kind == "sphere":
            prims.append(Sphere(center=tuple(p["center"]), radius=p["radius"], material=mat))
        elif kind == "box":
            prims.append(BoxPrim(box=Aabb(np.array(p["min"]), np.array(p["max"])), material=mat))
        elif kind == "plane":
            prims.append(
                PlanePrim(point=tuple(p["point"]), normal=tuple(p["normal"]), material=mat)
            )
        else:
            raise ValueError(f"unknown primitive kind {kind!r}")
    return SceneSpec(
        primitives=tuple(prims),
        background=tuple(d["background"]),
        light_dir=tuple(d["light_dir"]),
    )


def _camera_from_json(d: dict) -> PinholeCamera:
    return PinholeCamera(
        fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"], width=d["width"], height=d["height"]
    )


def trajectory_from_json(d: dict) -> Trajectory:
    cam = _camera_from_json(d["camera"])
    kind = d["kind"]
    if kind == "orbit":
        return OrbitTrajectory(
            center=tuple(d["center"]),
            radius=d["radius"],
            height=d["height"],
            n_frames=d["n_frames"],
            look_at=tuple(d["look_at"]),
            camera=cam,
        )
    if kind == "raster":
        return RasterScanTrajectory(
            corners=tuple(tuple(c) for c in d["corners"]),
            rows=d["rows"],
            cols=d["cols"],
            look_at=tuple(d["look_at"]),
            camera=cam,
        )
    raise ValueError(f"unknown trajectory kind {kind!r}")


def load_generation_spec(path):
    with open(path, "r", encoding="utf-8") as f:
        d = json.load(f)
    return scene_from_json(d["scene"]), trajectory_from_json(d["trajectory"])


# ---------------------------------------------------------------------------
# the fixed benchmark scene (sphere/box desk scene, 40-frame orbit, 128x128)


def benchmark_scene() -> SceneSpec:
    return SceneSpec(
        primitives=(
            BoxPrim(
                box=Aabb(np.array([-0.42, -0.42, -0.05]), np.array([0.42, 0.42, 0.0])),
                material=Material(diffuse=(0.55, 0.50, 0.44)),
            ),
            Sphere(
                center=(0.0, 0.02, 0.16),
                radius=0.16,
                material=Material(
                    diffuse=(0.72, 0.18, 0.14),
                    gloss=(0.45, 0.55, 0.65),
                    gloss_dir=(0.30, -0.20, 0.93),
                ),
            ),
            BoxPrim(
                box=Aabb(np.array([0.14, -0.32, 0.0]), np.array([0.34, -0.10, 0.22])),
                material=Material(diffuse=(0.18, 0.35, 0.78)),
            ),
            BoxPrim(
                box=Aabb(np.array([-0.34, 0.12, 0.0]), np.array([-0.12, 0.30, 0.13])),
                material=Material(diffuse=(0.22, 0.65, 0.28)),
            ),
        ),
        background=(0.09, 0.11, 0.14),
        light_dir=(-0.35, 0.25, 0.90),
    )


def benchmark_camera() -> PinholeCamera:
    return PinholeCamera(fx=110.0, fy=110.0, cx=64.0, cy=64.0, width=128, height=128)


def benchmark_trajectory(n_frames: int = 40) -> OrbitTrajectory:
    return OrbitTrajectory(
        center=(0.0, 0.0, 0.0),
        radius=0.62,
        height=0.40,
        n_frames=n_frames,
        look_at=(0.0, 0.0, 0.10),
        camera=benchmark_camera(),
    )


def benchmark_bounds() -> Aabb:
    return Aabb(np.array([-0.5, -0.5, -0.07]), np.array([0.5, 0.5, 0.55]))
