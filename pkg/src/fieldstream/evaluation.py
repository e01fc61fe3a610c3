"""Quality and performance harness: deterministic replay training, PSNR /
SSIM against held-out views, time-to-quality, and the render-time sweep.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Aabb, FrameSample, PinholeCamera, Pose, scale_camera
from .ingest import KeyframeBuffer, ReplayScript, SensorRegistry, replay_admit
from .metrics import psnr, ssim
from .sessionlog import Session, load_session
from .splat import SplatBackend, SplatTrainConfig
from .tsdf import MeshBackend, TsdfConfig
from .voxel import VoxelBackend, VoxelGrid, VoxelTrainConfig

SWEEP_FRACTIONS = (0.1, 0.25, 0.5, 0.75, 1.0)
CSV_COLUMNS = (
    "method",
    "dataset",
    "psnr_db",
    "ssim",
    "iter_ms",
    "tts_s",
    "render_ms_f010",
    "render_ms_f025",
    "render_ms_f050",
    "render_ms_f075",
    "render_ms_f100",
)
TIMING_COLUMNS = frozenset(
    ("iter_ms", "tts_s") + tuple(f"render_ms_f{int(round(f * 100)):03d}" for f in SWEEP_FRACTIONS)
)


@dataclass
class EvalSettings:
    methods: Tuple[str, ...] = ("voxel", "splat", "mesh")
    iterations: int = 2000
    eval_cadence: int = 25
    target_psnr: float = 0.0  # 0 disables early stop; tts still reports first crossing
    seed: int = 0
    voxel_resolution: Tuple[int, int, int] = (64, 64, 64)
    bounds: Optional[Aabb] = None  # None -> auto from back-projected depth
    splat_max_count: int = 12000
    voxel: VoxelTrainConfig = field(default_factory=VoxelTrainConfig)
    splat: SplatTrainConfig = field(default_factory=SplatTrainConfig)
    mesh: TsdfConfig = field(default_factory=TsdfConfig)


def build_buffer_from_session(
    session: Session, script: ReplayScript, capacity: Optional[int] = None
) -> Tuple[KeyframeBuffer, SensorRegistry]:
    """Deterministic replay: admit exactly the scripted frames in log order."""
    registry = SensorRegistry()
    for cam_id, (cam, has_depth) in sorted(session.cameras.items()):
        registry.register(cam_id, cam, has_depth)
    cap = capacity if capacity is not None else max(1, len(script.pairs))
    buffer = KeyframeBuffer.from_registry(cap, registry)
    for frame in session:
        replay_admit(buffer, registry, frame, script)
    return buffer, registry


def holdout_frames(session: Session, script: ReplayScript) -> List[FrameSample]:
    return [f for f in session if (f.camera_id, f.seq) in script]


def scene_bounds_from_buffer(buffer: KeyframeBuffer, pad: float = 0.08) -> Aabb:
    """Padded bounding box of all back-projected valid-depth pixels."""
    if not buffer.depth_enabled:
        raise ValueError("cannot infer bounds without depth")
    count = buffer.count
    pts_lo = np.full(3, np.inf)
    pts_hi = np.full(3, -np.inf)
    for i in range(count):
        depth = buffer.depth[i]
        valid = depth > 0
        if not np.any(valid):
            continue
        ys, xs = np.nonzero(valid)
        fx, fy, cx, cy = buffer.intrinsics[i]
        dx = (xs + 0.5 - cx) / fx
        dy = (ys + 0.5 - cy) / fy
        d_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        pts = buffer.trans[i] + (d_cam @ buffer.rot_mats[i].T) * depth[ys, xs][:, None]
        pts_lo = np.minimum(pts_lo, pts.min(axis=0))
        pts_hi = np.maximum(pts_hi, pts.max(axis=0))
    if not np.all(np.isfinite(pts_lo)):
        raise ValueError("no valid depth anywhere in the buffer")
    return Aabb(pts_lo - pad, pts_hi + pad)


def make_backend(method: str, buffer: KeyframeBuffer, settings: EvalSettings):
    if method == "voxel":
        bounds = settings.bounds or scene_bounds_from_buffer(buffer)
        grid = VoxelGrid(settings.voxel_resolution, bounds)
        return VoxelBackend(grid, settings.voxel)
    if method == "splat":
        return SplatBackend.from_buffer(
            buffer, settings.splat, max_count=settings.splat_max_count, seed=settings.seed
        )
    if method == "mesh":
        return MeshBackend(settings.mesh)
    raise ValueError(f"unknown method {method!r}")


def eval_views_psnr(backend, views: Sequence[FrameSample]) -> float:
    scores = [psnr(backend.render(v.camera, v.pose).rgb, v.rgb) for v in views]
    return float(np.mean(scores))


@dataclass
class TrainResult:
    backend: object
    iterations: int
    train_seconds: float  # training time only, eval renders excluded
    iter_ms: float
    tts_s: Optional[float]  # first crossing of target_psnr, None if never
    tts_iteration: Optional[int]
    psnr_trace: List[Tuple[int, float]]


def time_to_quality(
    backend,
    buffer: KeyframeBuffer,
    eval_views: Sequence[FrameSample],
    target_psnr: float,
    iterations: int,
    eval_cadence: int = 25,
    seed: int = 0,
    stop_at_target: bool = False,
) -> TrainResult:
    """Train with per-iteration wall-clock accounting; evaluation renders are
    excluded from the timed budget. An unreachable target reports tts None."""
    train_seconds = 0.0
    tts = None
    tts_iter = None
    trace: List[Tuple[int, float]] = []

    if target_psnr > 0.0 and eval_views:
        first = eval_views_psnr(backend, eval_views)
        trace.append((0, first))
        if first >= target_psnr:
            return TrainResult(backend, 0, 0.0, 0.0, 0.0, 0, trace)

    done = 0
    for i in range(iterations):
        t0 = time.perf_counter()
        backend.train_step(buffer, seed + i)
        train_seconds += time.perf_counter() - t0
        done = i + 1
        if eval_views and (done % eval_cadence == 0 or done == iterations):
            score = eval_views_psnr(backend, eval_views)
            trace.append((done, score))
            if tts is None and target_psnr > 0.0 and score >= target_psnr:
                tts = train_seconds
                tts_iter = done
                if stop_at_target:
                    break
    iter_ms = 1000.0 * train_seconds / max(1, done)
    return TrainResult(backend, done, train_seconds, iter_ms, tts, tts_iter, trace)


def render_sweep(
    render_fn: Callable[[PinholeCamera, Pose], object],
    camera: PinholeCamera,
    pose: Pose,
    fractions: Sequence[float] = SWEEP_FRACTIONS,
    repeats: int = 10,
) -> List[Tuple[float, float, float]]:
    """(fraction, mean ms, std ms) per fraction; one warm-up render per
    fraction is excluded from the statistics."""
    rows = []
    for frac in fractions:
        cam = scale_camera(camera, frac)
        render_fn(cam, pose)  # warm-up
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            render_fn(cam, pose)
            times.append(1000.0 * (time.perf_counter() - t0))
        rows.append((frac, float(np.mean(times)), float(np.std(times))))
    return rows


@dataclass
class MethodRow:
    method: str
    dataset: str
    psnr_db: float
    ssim: float
    iter_ms: float
    tts_s: Optional[float]
    render_ms: Dict[float, float]

    def as_record(self) -> Dict[str, str]:
        rec = {
            "method": self.method,
            "dataset": self.dataset,
            "psnr_db": f"{self.psnr_db:.6f}",
            "ssim": f"{self.ssim:.6f}",
            "iter_ms": f"{self.iter_ms:.3f}",
            "tts_s": "unreachable" if self.tts_s is None else f"{self.tts_s:.3f}",
        }
        for frac in SWEEP_FRACTIONS:
            rec[f"render_ms_f{int(round(frac * 100)):03d}"] = f"{self.render_ms[frac]:.3f}"
        return rec


@dataclass
class EvalReport:
    rows: List[MethodRow]

    def to_csv(self, path) -> None:
        lines = [",".join(CSV_COLUMNS)]
        for row in self.rows:
            rec = row.as_record()
            lines.append(",".join(rec[c] for c in CSV_COLUMNS))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def to_json(self, path) -> None:
        data = [row.as_record() for row in self.rows]
        Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def run_eval(
    session_dir,
    script: ReplayScript,
    holdout: ReplayScript,
    settings: EvalSettings,
    dataset_name: Optional[str] = None,
    out_dir: Optional[Path] = None,
) -> EvalReport:
    """Train every requested method on the scripted replay and report
    quality, iteration time, time-to-target, and the render sweep.
    Checkpoints land in out_dir when given."""
    session = load_session(session_dir)
    dataset = dataset_name or Path(session_dir).name
    buffer, _ = build_buffer_from_session(session, script)
    views = holdout_frames(session, holdout)
    if not views:
        raise ValueError("holdout script selects no frames")

    rows: List[MethodRow] = []
    for method in settings.methods:
        backend = make_backend(method, buffer, settings)
        iters = buffer.count if method == "mesh" else settings.iterations
        result = time_to_quality(
            backend,
            buffer,
            views,
            settings.target_psnr,
            iters,
            eval_cadence=settings.eval_cadence,
            seed=settings.seed,
        )
        psnr_final = eval_views_psnr(backend, views)
        ssim_final = float(np.mean([ssim(backend.render(v.camera, v.pose).rgb, v.rgb) for v in views]))
        sweep = render_sweep(
            lambda cam, pose: backend.render(cam, pose), views[0].camera, views[0].pose
        )
        rows.append(
            MethodRow(
                method=method,
                dataset=dataset,
                psnr_db=psnr_final,
                ssim=ssim_final,
                iter_ms=result.iter_ms,
                tts_s=result.tts_s,
                render_ms={f: m for f, m, _ in sweep},
            )
        )
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            suffix = {"voxel": "voxel.ckpt", "splat": "splat.ckpt", "mesh": "mesh.ply"}[method]
            backend.save(out_dir / suffix)
    return EvalReport(rows=rows)
