"""Frame admission into a fixed-capacity keyframe buffer.

Incoming frames pass a blur filter (Laplacian variance) and a pose-novelty
filter (nearest stored keyframe, translation plus weighted rotation), are
rectified and resized to the canonical resolution of the largest
registered camera, and land in preallocated arrays. Training pulls
batches that prioritize entries whose update flag is set.
"""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .core import (
    FrameSample,
    PinholeCamera,
    Pose,
    geodesic_angle,
)
from .imaging import resize_bilinear, resize_nearest, rgb_to_gray, undistort_image

DEFAULT_BLUR_THRESHOLD = 0.0025  # Laplacian variance on [0,1] grayscale
DEFAULT_NOVELTY_THRESHOLD = 0.05  # meters
DEFAULT_ROTATION_WEIGHT = 0.5  # meters per radian
DEFAULT_INITIAL_BATCH = 5


@dataclass(frozen=True)
class FilterPolicy:
    blur_threshold: float = DEFAULT_BLUR_THRESHOLD
    novelty_threshold: float = DEFAULT_NOVELTY_THRESHOLD
    rotation_weight: float = DEFAULT_ROTATION_WEIGHT
    initial_batch_size: int = DEFAULT_INITIAL_BATCH

    def __post_init__(self):
        if min(self.blur_threshold, self.novelty_threshold, self.rotation_weight) < 0:
            raise ValueError("thresholds must be nonnegative")
        if self.initial_batch_size < 1:
            raise ValueError("initial_batch_size must be >= 1")


class AdmitStatus(enum.Enum):
    ADMITTED = "admitted"
    REJECTED_BLUR = "rejected_blur"
    REJECTED_NOVELTY = "rejected_novelty"
    REJECTED_FULL = "rejected_full"
    SKIPPED = "skipped"


@dataclass(frozen=True)
class Admission:
    status: AdmitStatus
    index: Optional[int] = None
    blur: Optional[float] = None
    novelty: Optional[float] = None

    @property
    def admitted(self) -> bool:
        return self.status is AdmitStatus.ADMITTED


def blur_score(rgb: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian response of the grayscale image,
    borders excluded."""
    if rgb.size == 0:
        raise ValueError("empty image")
    g = rgb_to_gray(np.asarray(rgb, dtype=np.float64))
    if g.shape[0] < 3 or g.shape[1] < 3:
        return 0.0
    resp = (
        g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    )
    return float(np.var(resp))


@dataclass
class SensorState:
    camera: PinholeCamera
    has_depth: bool
    frame_count: int = 0
    last_timestamp: Optional[float] = None
    mean_rate_hz: float = 0.0
    last_admitted_pose: Optional[Pose] = None


class SensorRegistry:
    """Per-camera bookkeeping: intrinsics, depth availability, rates."""

    def __init__(self):
        self.sensors: Dict[str, SensorState] = {}

    def register(self, camera_id: str, camera: PinholeCamera, has_depth: bool) -> None:
        if camera_id in self.sensors:
            raise ValueError(f"camera {camera_id!r} already registered")
        self.sensors[camera_id] = SensorState(camera=camera, has_depth=has_depth)

    def __contains__(self, camera_id: str) -> bool:
        return camera_id in self.sensors

    def observe(self, camera_id: str, timestamp: float) -> None:
        s = self.sensors[camera_id]
        if s.last_timestamp is not None and timestamp > s.last_timestamp:
            inst = 1.0 / (timestamp - s.last_timestamp)
            s.mean_rate_hz = (s.mean_rate_hz * s.frame_count + inst) / (s.frame_count + 1)
        s.frame_count += 1
        s.last_timestamp = timestamp

    @property
    def depth_enabled(self) -> bool:
        """Depth training is available only when every camera provides it."""
        return bool(self.sensors) and all(s.has_depth for s in self.sensors.values())

    def canonical_resolution(self) -> Tuple[int, int]:
        """(width, height) of the largest registered camera by pixel count."""
        if not self.sensors:
            raise ValueError("no cameras registered")
        best = max(self.sensors.values(), key=lambda s: s.camera.width * s.camera.height)
        return best.camera.width, best.camera.height


@dataclass(frozen=True)
class ReplayScript:
    pairs: frozenset  # of (camera_id, seq)

    def __post_init__(self):
        object.__setattr__(self, "pairs", frozenset(self.pairs))

    def __contains__(self, key: Tuple[str, int]) -> bool:
        return key in self.pairs

    @staticmethod
    def from_file(path) -> "ReplayScript":
        pairs = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                cam, seq = line.rsplit(",", 1)
                pairs.append((cam, int(seq)))
        return ReplayScript(pairs)

    def save(self, path) -> None:
        entries = sorted(self.pairs)
        with open(path, "w", encoding="utf-8") as f:
            for cam, seq in entries:
                f.write(f"{cam},{seq}\n")


class KeyframeBuffer:
    """Preallocated training store with per-entry update flags.

    Thread contract: one concurrent writer (admission) and one concurrent
    reader (batch sampling); both serialize on the internal lock so a
    batch never observes a partially written entry, and update-flag
    clearing is atomic with batch construction.
    """

    def __init__(
        self,
        capacity: int,
        canonical_width: int,
        canonical_height: int,
        depth_enabled: bool,
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.width = canonical_width
        self.height = canonical_height
        self.depth_enabled = depth_enabled
        self.rgb = np.zeros((capacity, canonical_height, canonical_width, 3))
        self.depth = (
            np.zeros((capacity, canonical_height, canonical_width))
            if depth_enabled
            else None
        )
        self.updated = np.zeros(capacity, dtype=bool)
        # per-entry gather arrays for fast batch construction
        self.rot_mats = np.zeros((capacity, 3, 3))
        self.trans = np.zeros((capacity, 3))
        self.intrinsics = np.zeros((capacity, 4))  # fx, fy, cx, cy
        self.poses: List[Pose] = []
        self.cameras: List[PinholeCamera] = []
        self.seqs: List[int] = []
        self.camera_ids: List[str] = []
        self.blur_scores: List[float] = []
        self.novelty_scores: List[float] = []
        self.count = 0
        self.lock = threading.Lock()

    @staticmethod
    def from_registry(capacity: int, registry: SensorRegistry) -> "KeyframeBuffer":
        w, h = registry.canonical_resolution()
        return KeyframeBuffer(capacity, w, h, registry.depth_enabled)

    @property
    def full(self) -> bool:
        return self.count >= self.capacity

    def _store(self, frame: FrameSample, blur: float, novelty: float) -> int:
        """Resize to canonical resolution and write the next slot. Caller
        holds the lock."""
        rgb = frame.rgb
        depth = frame.depth
        cam = frame.camera
        if (cam.width, cam.height) != (self.width, self.height):
            rgb = np.clip(resize_bilinear(rgb, self.height, self.width), 0.0, 1.0)
            if depth is not None:
                depth = resize_nearest(depth, self.height, self.width)
            cam = PinholeCamera(
                fx=cam.fx * (self.width / cam.width),
                fy=cam.fy * (self.height / cam.height),
                cx=cam.cx * (self.width / cam.width),
                cy=cam.cy * (self.height / cam.height),
                width=self.width,
                height=self.height,
                rectified=True,
            )
        idx = self.count
        self.rgb[idx] = rgb
        if self.depth_enabled:
            self.depth[idx] = depth
        self.rot_mats[idx] = frame.pose.rotation_matrix()
        self.trans[idx] = frame.pose.trans
        self.intrinsics[idx] = (cam.fx, cam.fy, cam.cx, cam.cy)
        self.poses.append(frame.pose)
        self.cameras.append(cam)
        self.seqs.append(frame.seq)
        self.camera_ids.append(frame.camera_id)
        self.blur_scores.append(blur)
        self.novelty_scores.append(novelty)
        self.updated[idx] = True
        self.count = idx + 1
        return idx


def pose_novelty(candidate: Pose, buffer: KeyframeBuffer, rotation_weight: float) -> float:
    """Distance to the nearest stored keyframe pose: translation norm plus
    rotation_weight times the geodesic rotation angle. Empty buffer -> inf."""
    if buffer.count == 0:
        return math.inf
    best = math.inf
    for i in range(buffer.count):
        p = buffer.poses[i]
        d = float(np.linalg.norm(candidate.trans - p.trans))
        d += rotation_weight * geodesic_angle(candidate.quat, p.quat)
        if d < best:
            best = d
    return best


def _rectify(frame: FrameSample) -> FrameSample:
    if frame.camera.rectified:
        return frame
    rgb = np.clip(undistort_image(frame.rgb, frame.camera), 0.0, 1.0)
    depth = None
    if frame.depth is not None:
        depth = undistort_image(frame.depth, frame.camera, nearest=True)
    cam = PinholeCamera(
        fx=frame.camera.fx,
        fy=frame.camera.fy,
        cx=frame.camera.cx,
        cy=frame.camera.cy,
        width=frame.camera.width,
        height=frame.camera.height,
        rectified=True,
    )
    return FrameSample(
        camera_id=frame.camera_id,
        seq=frame.seq,
        timestamp=frame.timestamp,
        rgb=rgb,
        depth=depth,
        pose=frame.pose,
        camera=cam,
    )


def _check_registered(buffer: KeyframeBuffer, registry: SensorRegistry, frame: FrameSample):
    if frame.camera_id not in registry:
        raise ValueError(f"camera {frame.camera_id!r} not registered")
    if buffer.depth_enabled and frame.depth is None:
        raise ValueError("depth-enabled buffer requires depth on every frame")


def admit_frame(
    buffer: KeyframeBuffer,
    registry: SensorRegistry,
    frame: FrameSample,
    policy: FilterPolicy,
) -> Admission:
    _check_registered(buffer, registry, frame)
    registry.observe(frame.camera_id, frame.timestamp)
    frame = _rectify(frame)
    blur = blur_score(frame.rgb)
    if blur < policy.blur_threshold:
        return Admission(AdmitStatus.REJECTED_BLUR, blur=blur)
    with buffer.lock:
        novelty = pose_novelty(frame.pose, buffer, policy.rotation_weight)
        if novelty < policy.novelty_threshold:
            return Admission(AdmitStatus.REJECTED_NOVELTY, blur=blur, novelty=novelty)
        if buffer.full:
            return Admission(AdmitStatus.REJECTED_FULL, blur=blur, novelty=novelty)
        idx = buffer._store(frame, blur, novelty)
    registry.sensors[frame.camera_id].last_admitted_pose = frame.pose
    return Admission(AdmitStatus.ADMITTED, index=idx, blur=blur, novelty=novelty)


def replay_admit(
    buffer: KeyframeBuffer,
    registry: SensorRegistry,
    frame: FrameSample,
    script: ReplayScript,
) -> Admission:
    """Deterministic replay admission: the script replaces the filters."""
    _check_registered(buffer, registry, frame)
    registry.observe(frame.camera_id, frame.timestamp)
    if (frame.camera_id, frame.seq) not in script:
        return Admission(AdmitStatus.SKIPPED)
    frame = _rectify(frame)
    blur = blur_score(frame.rgb)
    with buffer.lock:
        if buffer.full:
            return Admission(AdmitStatus.REJECTED_FULL, blur=blur)
        novelty = pose_novelty(frame.pose, buffer, 0.0)
        idx = buffer._store(frame, blur, novelty)
    registry.sensors[frame.camera_id].last_admitted_pose = frame.pose
    return Admission(AdmitStatus.ADMITTED, index=idx, blur=blur, novelty=novelty)


def online_mode_ready(buffer: KeyframeBuffer, policy: FilterPolicy) -> bool:
    return buffer.count >= policy.initial_batch_size


@dataclass(frozen=True)
class RayBatch:
    origins: np.ndarray  # (N, 3)
    dirs: np.ndarray  # (N, 3) unit
    rgb: np.ndarray  # (N, 3) targets
    depth: Optional[np.ndarray]  # (N,) targets, 0 = invalid; None if unavailable
    entry_index: np.ndarray  # (N,)
    pixels: np.ndarray  # (N, 2) as (px, py)

    def __len__(self) -> int:
        return self.origins.shape[0]


def sample_batch(buffer: KeyframeBuffer, n_rays: int, rng_seed: int) -> RayBatch:
    """Draw a training batch: every updated entry contributes at least one
    ray (when n_rays allows), the remainder is uniform over all entries and
    pixels. Flags of sampled entries are cleared atomically."""
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    rng = np.random.default_rng(rng_seed)
    with buffer.lock:
        count = buffer.count
        if count == 0:
            raise ValueError("cannot sample from an empty buffer")
        updated = np.flatnonzero(buffer.updated[:count])
        head = updated[: min(n_rays, len(updated))]
        n_rest = n_rays - len(head)
        rest = rng.integers(0, count, size=n_rest)
        entries = np.concatenate([head, rest]).astype(np.int64)
        px = rng.integers(0, buffer.width, size=n_rays)
        py = rng.integers(0, buffer.height, size=n_rays)

        rgb = buffer.rgb[entries, py, px].copy()
        depth = (
            buffer.depth[entries, py, px].copy() if buffer.depth_enabled else None
        )
        fx, fy, cx, cy = buffer.intrinsics[entries].T.copy()
        rot = buffer.rot_mats[entries].copy()
        origins = buffer.trans[entries].copy()
        buffer.updated[np.unique(entries)] = False

    dx = (px + 0.5 - cx) / fx
    dy = (py + 0.5 - cy) / fy
    d_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = np.einsum("nij,nj->ni", rot, d_cam)
    return RayBatch(
        origins=origins,
        dirs=dirs,
        rgb=rgb,
        depth=depth,
        entry_index=entries,
        pixels=np.stack([px, py], axis=-1),
    )
