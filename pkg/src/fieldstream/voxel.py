"""Dense voxel radiance field: softplus density plus degree-1 SH color,
rendered by ray marching with front-to-back compositing and trained
online by Adam on a photometric (optionally depth-supervised) loss.

Parameters live at cell centers; interpolation is trilinear with border
clamping. SH basis constants are folded into the stored coefficients, so
a channel evaluates as sigmoid(k0 + k1*dx + k2*dy + k3*dz).
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import kernels
from .core import Aabb, PinholeCamera, Pose, RenderProduct, camera_rays, ray_aabb_clip_batch
from .ingest import KeyframeBuffer, RayBatch, sample_batch
from .optim import Adam, TrainStats, TrainStepError

CKPT_MAGIC = b"VOXF"
CKPT_VERSION = 1

# degree-0 / degree-1 real SH constants (folded into stored coefficients)
SH_C0 = 0.2820948
SH_C1 = 0.4886025


@dataclass
class VoxelTrainConfig:
    step_size: float = 0.15
    rays_per_batch: int = 1024
    samples_per_ray: int = 72
    near: float = 0.1
    far: float = 3.0
    depth_loss_weight: float = 0.05
    background_color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (self.near < self.far):
            raise ValueError("near must be < far")
        if self.rays_per_batch < 1 or self.samples_per_ray < 1:
            raise ValueError("counts must be >= 1")


class VoxelGrid:
    """Trainable grid: density_raw (Nx,Ny,Nz) and sh (Nx,Ny,Nz,12)."""

    def __init__(self, resolution: Tuple[int, int, int], bounds: Aabb, init_density: float = 0.0):
        if min(resolution) < 2:
            raise ValueError("resolution must be >= 2 per axis")
        self.resolution = tuple(int(n) for n in resolution)
        self.bounds = bounds
        self.density_raw = np.full(self.resolution, float(init_density))
        self.sh = np.zeros(self.resolution + (12,))
        self.cell = (bounds.hi - bounds.lo) / np.asarray(self.resolution, dtype=np.float64)

    def copy(self) -> "VoxelGrid":
        g = VoxelGrid(self.resolution, self.bounds)
        g.density_raw = self.density_raw.copy()
        g.sh = self.sh.copy()
        return g

    # -- direct field queries ------------------------------------------------

    def sample_field(
        self,
        points: np.ndarray,
        view_dirs: np.ndarray,
        background: Tuple[float, float, float] = (0.5, 0.5, 0.5),
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Activated (sigma, rgb) at world points; outside the bounds the
        density is 0 and the color is the background."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dirs = np.broadcast_to(np.asarray(view_dirs, dtype=np.float64), pts.shape)
        u = (pts - self.bounds.lo) / self.cell - 0.5
        shape = np.asarray(self.resolution)
        base = np.clip(np.floor(u).astype(np.int64), 0, shape - 2)
        frac = np.clip(u - base, 0.0, 1.0)
        raw = np.zeros(pts.shape[0])
        coeffs = np.zeros((pts.shape[0], 12))
        for di in range(2):
            wi = frac[:, 0] if di else 1.0 - frac[:, 0]
            for dj in range(2):
                wj = frac[:, 1] if dj else 1.0 - frac[:, 1]
                for dk in range(2):
                    wk = frac[:, 2] if dk else 1.0 - frac[:, 2]
                    w = wi * wj * wk
                    idx = (base[:, 0] + di, base[:, 1] + dj, base[:, 2] + dk)
                    raw += w * self.density_raw[idx]
                    coeffs += w[:, None] * self.sh[idx]
        sigma = np.logaddexp(0.0, raw)  # softplus
        k = coeffs.reshape(-1, 3, 4)
        affine = k[..., 0] + np.einsum("ncj,nj->nc", k[..., 1:], dirs)
        rgb = 1.0 / (1.0 + np.exp(-affine))
        outside = ~self.bounds.contains(pts)
        sigma[outside] = 0.0
        rgb[outside] = background
        return sigma, rgb

    # -- checkpoints ----------------------------------------------------------

    def save(self, path) -> None:
        nx, ny, nz = self.resolution
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<H", CKPT_VERSION))
            f.write(struct.pack("<III", nx, ny, nz))
            f.write(struct.pack("<6d", *self.bounds.lo, *self.bounds.hi))
            f.write(self.density_raw.astype("<f4").ravel(order="F").tobytes())
            f.write(self.sh.astype("<f4").ravel(order="F").tobytes())

    @staticmethod
    def load(path) -> "VoxelGrid":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CKPT_MAGIC:
                raise ValueError(f"not a voxel checkpoint: magic {magic!r}")
            (version,) = struct.unpack("<H", f.read(2))
            if version != CKPT_VERSION:
                raise ValueError(f"unsupported voxel checkpoint version {version}")
            nx, ny, nz = struct.unpack("<III", f.read(12))
            b = struct.unpack("<6d", f.read(48))
            grid = VoxelGrid((nx, ny, nz), Aabb(np.array(b[:3]), np.array(b[3:])))
            n = nx * ny * nz
            dens = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float64)
            grid.density_raw = dens.reshape((nx, ny, nz), order="F").copy()
            sh = np.frombuffer(f.read(4 * n * 12), dtype="<f4").astype(np.float64)
            grid.sh = sh.reshape((nx, ny, nz, 12), order="F").copy()
        return grid


def _ray_intervals(
    grid: VoxelGrid,
    origins: np.ndarray,
    dirs: np.ndarray,
    crop: Optional[Aabb],
    near: float,
    far: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Integration interval per ray: [near, far] ∩ bounds ∩ crop."""
    iv = ray_aabb_clip_batch(origins, dirs, grid.bounds.lo, grid.bounds.hi)
    t0 = np.maximum(iv[:, 0], near)
    t1 = np.minimum(iv[:, 1], far)
    if crop is not None:
        cv = ray_aabb_clip_batch(origins, dirs, crop.lo, crop.hi)
        t0 = np.maximum(t0, cv[:, 0])
        t1 = np.minimum(t1, cv[:, 1])
    return t0, t1


def render_rays(
    grid: VoxelGrid,
    origins: np.ndarray,
    dirs: np.ndarray,
    config: VoxelTrainConfig,
    crop: Optional[Aabb] = None,
):
    """March rays through the grid. Returns (rgb, depth, opacity, t_end)."""
    t0, t1 = _ray_intervals(grid, origins, dirs, crop, config.near, config.far)
    bg = np.asarray(config.background_color, dtype=np.float64)
    return kernels.voxel_forward(
        grid.density_raw,
        grid.sh,
        grid.bounds.lo,
        grid.cell,
        np.ascontiguousarray(origins),
        np.ascontiguousarray(dirs),
        t0,
        t1,
        config.samples_per_ray,
        bg,
        config.far,
    )


def render_image(
    grid: VoxelGrid,
    camera: PinholeCamera,
    pose: Pose,
    config: VoxelTrainConfig,
    crop: Optional[Aabb] = None,
) -> RenderProduct:
    if not camera.rectified:
        raise ValueError("render requires a rectified camera")
    start = time.perf_counter()
    origins, dirs = camera_rays(camera, pose)
    rgb, depth, opac, _ = render_rays(grid, origins, dirs, config, crop)
    h, w = camera.height, camera.width
    return RenderProduct(
        rgb=np.clip(rgb.reshape(h, w, 3), 0.0, 1.0),
        depth=depth.reshape(h, w),
        opacity=opac.reshape(h, w),
        render_time=time.perf_counter() - start,
    )


def _loss_and_upstream(
    rgb: np.ndarray,
    depth: np.ndarray,
    batch: RayBatch,
    depth_weight: float,
):
    n = rgb.shape[0]
    residual = rgb - batch.rgb
    photo = float(np.mean(np.sum(residual * residual, axis=1)))
    d_rgb = (2.0 / n) * residual
    depth_loss = 0.0
    d_depth = np.zeros(n)
    if depth_weight > 0.0 and batch.depth is not None:
        valid = batch.depth > 0.0
        n_valid = int(np.count_nonzero(valid))
        if n_valid:
            diff = depth - batch.depth
            depth_loss = float(np.mean(np.abs(diff[valid])))
            d_depth = np.where(valid, depth_weight * np.sign(diff) / n_valid, 0.0)
    return photo, depth_loss, d_rgb, d_depth


def train_step_voxel(
    grid: VoxelGrid,
    optimizer: Adam,
    batch: RayBatch,
    config: VoxelTrainConfig,
) -> TrainStats:
    """One optimization step: analytic gradients through compositing,
    interpolation, and activations, then one Adam update."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    start = time.perf_counter()
    t0, t1 = _ray_intervals(grid, batch.origins, batch.dirs, None, config.near, config.far)
    bg = np.asarray(config.background_color, dtype=np.float64)
    rgb, depth, opac, _ = kernels.voxel_forward(
        grid.density_raw, grid.sh, grid.bounds.lo, grid.cell,
        batch.origins, batch.dirs, t0, t1, config.samples_per_ray, bg, config.far,
    )
    photo, depth_loss, d_rgb, d_depth = _loss_and_upstream(
        rgb, depth, batch, config.depth_loss_weight
    )
    total = photo + config.depth_loss_weight * depth_loss
    if not np.isfinite(total):
        raise TrainStepError(
            f"non-finite loss (photometric={photo}, depth={depth_loss}); step rejected"
        )
    g_density = np.zeros_like(grid.density_raw)
    g_sh = np.zeros_like(grid.sh)
    kernels.voxel_backward(
        grid.density_raw, grid.sh, grid.bounds.lo, grid.cell,
        batch.origins, batch.dirs, t0, t1, config.samples_per_ray, bg, config.far,
        d_rgb, d_depth, np.zeros(len(batch)), g_density, g_sh,
    )
    optimizer.step({"density": g_density, "sh": g_sh})
    return TrainStats(photo, depth_loss, time.perf_counter() - start)


def voxel_loss(
    grid: VoxelGrid, batch: RayBatch, config: VoxelTrainConfig
) -> float:
    """Training loss without an update (finite-difference oracle hook)."""
    t0, t1 = _ray_intervals(grid, batch.origins, batch.dirs, None, config.near, config.far)
    bg = np.asarray(config.background_color, dtype=np.float64)
    rgb, depth, _, _ = kernels.voxel_forward(
        grid.density_raw, grid.sh, grid.bounds.lo, grid.cell,
        batch.origins, batch.dirs, t0, t1, config.samples_per_ray, bg, config.far,
    )
    photo, depth_loss, _, _ = _loss_and_upstream(rgb, depth, batch, config.depth_loss_weight)
    return photo + config.depth_loss_weight * depth_loss


class VoxelBackend:
    """Service-facing wrapper: owns the grid, optimizer, and train cadence.

    Training owns the parameters; renders issued between steps observe a
    consistent state (the scheduler never overlaps the two). ``snapshot``
    returns an independent copy for renders that must run concurrently.
    """

    name = "voxel"

    def __init__(self, grid: VoxelGrid, config: VoxelTrainConfig):
        self.grid = grid
        self.config = config
        self.optimizer = Adam(
            {"density": grid.density_raw, "sh": grid.sh},
            lr=config.step_size,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
        )
        self.iteration = 0

    def train_step(self, buffer: KeyframeBuffer, seed: int) -> TrainStats:
        batch = sample_batch(buffer, self.config.rays_per_batch, seed)
        stats = train_step_voxel(self.grid, self.optimizer, batch, self.config)
        self.iteration += 1
        return stats

    def render(self, camera: PinholeCamera, pose: Pose, crop: Optional[Aabb] = None) -> RenderProduct:
        return render_image(self.grid, camera, pose, self.config, crop)

    def snapshot(self) -> VoxelGrid:
        return self.grid.copy()

    def save(self, path) -> None:
        self.grid.save(path)
