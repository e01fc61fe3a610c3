"""3D Gaussian splatting backend: anisotropic Gaussians initialized from
back-projected RGBD keyframes, rendered by tile-based depth-sorted alpha
blending, trained online with hand-derived gradients.

Conventions: quaternions are renormalized inside the forward pass, scales
are exp-activated, opacity is sigmoid-activated, and per-Gaussian color is
degree-1 SH (explicit basis constants) of the unit direction from the
camera origin to the Gaussian mean, squashed by a sigmoid.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .core import Aabb, PinholeCamera, Pose, RenderProduct
from .ingest import KeyframeBuffer
from .optim import Adam, TrainStats, TrainStepError
from .voxel import SH_C0, SH_C1

CKPT_MAGIC = b"SPLT"
CKPT_VERSION = 1

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
_SINGULAR_DET = 1e-12
_RADIUS_PAD = 1e-3  # pixels; keeps tile culling conservative vs. float rounding
_LONELY_SCALE = 0.05  # meters; isotropic fallback when too few init points


@dataclass
class SplatTrainConfig:
    lr_means: float = 2e-4
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1e-2
    prune_opacity_threshold: float = 0.005
    prune_interval: int = 500
    transmittance_floor: float = 1e-4
    tile_size: int = 16
    low_pass: float = 0.3  # pixels^2
    near: float = 0.1
    far: float = 3.0
    background_color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.prune_opacity_threshold < 1.0 or self.prune_opacity_threshold == 0.0):
            raise ValueError("prune threshold must lie in [0, 1)")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")

    def lr_dict(self) -> dict:
        return {
            "means": self.lr_means,
            "log_scales": self.lr_scales,
            "rotations": self.lr_rotations,
            "opacity_logit": self.lr_opacity,
            "color_sh": self.lr_color,
        }


class SplatSet:
    """Parameter arrays for N Gaussians."""

    def __init__(
        self,
        means: np.ndarray,
        log_scales: np.ndarray,
        rotations: np.ndarray,
        opacity_logit: np.ndarray,
        color_sh: np.ndarray,
    ):
        n = means.shape[0]
        if not (
            means.shape == (n, 3)
            and log_scales.shape == (n, 3)
            and rotations.shape == (n, 4)
            and opacity_logit.shape == (n,)
            and color_sh.shape == (n, 3, 4)
        ):
            raise ValueError("inconsistent splat array shapes")
        self.means = np.asarray(means, dtype=np.float64)
        self.log_scales = np.asarray(log_scales, dtype=np.float64)
        self.rotations = np.asarray(rotations, dtype=np.float64)
        self.opacity_logit = np.asarray(opacity_logit, dtype=np.float64)
        self.color_sh = np.asarray(color_sh, dtype=np.float64)

    def __len__(self) -> int:
        return self.means.shape[0]

    @staticmethod
    def empty() -> "SplatSet":
        return SplatSet(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3, 4))
        )

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "SplatSet":
        return SplatSet(
            self.means.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logit.copy(),
            self.color_sh.copy(),
        )

    def params(self) -> dict:
        return {
            "means": self.means,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logit": self.opacity_logit,
            "color_sh": self.color_sh,
        }

    # -- serialization --------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<H", CKPT_VERSION))
            f.write(struct.pack("<Q", len(self)))
            for arr in (
                self.means,
                self.log_scales,
                self.rotations,
                self.opacity_logit,
                self.color_sh,
            ):
                f.write(arr.astype("<f4").tobytes())

    @staticmethod
    def load(path) -> "SplatSet":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CKPT_MAGIC:
                raise ValueError(f"not a splat checkpoint: magic {magic!r}")
            (version,) = struct.unpack("<H", f.read(2))
            if version != CKPT_VERSION:
                raise ValueError(f"unsupported splat checkpoint version {version}")
            (n,) = struct.unpack("<Q", f.read(8))

            def read(shape):
                count = int(np.prod(shape))
                return (
                    np.frombuffer(f.read(4 * count), dtype="<f4")
                    .astype(np.float64)
                    .reshape(shape)
                )

            return SplatSet(
                read((n, 3)), read((n, 3)), read((n, 4)), read((n,)), read((n, 3, 4))
            )

    def export_ply(self, path) -> None:
        """Binary PLY in the layout common splat viewers read: position,
        dc/rest SH coefficients, logit opacity, log scales, wxyz rotation."""
        n = len(self)
        props = (
            ["x", "y", "z"]
            + [f"f_dc_{i}" for i in range(3)]
            + [f"f_rest_{i}" for i in range(9)]
            + ["opacity"]
            + [f"scale_{i}" for i in range(3)]
            + [f"rot_{i}" for i in range(4)]
        )
        header = "ply\nformat binary_little_endian 1.0\n"
        header += f"element vertex {n}\n"
        header += "".join(f"property float {p}\n" for p in props)
        header += "end_header\n"
        rest = np.concatenate(
            [self.color_sh[:, 0, 1:4], self.color_sh[:, 1, 1:4], self.color_sh[:, 2, 1:4]],
            axis=1,
        )
        data = np.concatenate(
            [
                self.means,
                self.color_sh[:, :, 0],
                rest,
                self.opacity_logit[:, None],
                self.log_scales,
                self.rotations,
            ],
            axis=1,
        ).astype("<f4")
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(data.tobytes())


def _logit(x: np.ndarray) -> np.ndarray:
    return np.log(x) - np.log1p(-x)


def init_from_rgbd(buffer: KeyframeBuffer, max_count: int, rng_seed: int) -> SplatSet:
    """Back-project up to max_count valid-depth pixels into isotropic
    Gaussians: color from the pixel, scale from half the median distance to
    the 3 nearest sampled neighbors."""
    if not buffer.depth_enabled:
        raise ValueError("RGBD initialization requires a depth-enabled buffer")
    count = buffer.count
    if count == 0:
        raise ValueError("empty buffer")
    depth = buffer.depth[:count]
    valid = depth > 0.0
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        raise ValueError("no valid depth pixels to initialize from")

    flat = np.flatnonzero(valid.ravel())
    rng = np.random.default_rng(rng_seed)
    if n_valid > max_count:
        flat = np.sort(rng.choice(flat, size=max_count, replace=False))
    entry, py, px = np.unravel_index(flat, valid.shape)

    fx, fy, cx, cy = buffer.intrinsics[entry].T
    dx = (px + 0.5 - cx) / fx
    dy = (py + 0.5 - cy) / fy
    d_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = np.einsum("nij,nj->ni", buffer.rot_mats[entry], d_cam)
    points = buffer.trans[entry] + dirs * depth[entry, py, px][:, None]

    rgb = np.clip(buffer.rgb[entry, py, px], 1e-4, 1.0 - 1e-4)
    color_sh = np.zeros((len(points), 3, 4))
    color_sh[:, :, 0] = _logit(rgb) / SH_C0

    n = len(points)
    if n >= 4:
        tree = cKDTree(points)
        dists, _ = tree.query(points, k=4)
        nearest3 = np.median(dists[:, 1:4], axis=1)
        nearest3 = np.maximum(nearest3, 1e-6)
        log_scales = np.repeat(np.log(nearest3 / 2.0)[:, None], 3, axis=1)
    else:
        log_scales = np.full((n, 3), math.log(_LONELY_SCALE))

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return SplatSet(points, log_scales, rotations, np.zeros(n), color_sh)


# ---------------------------------------------------------------------------
# projection


def _quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    ).reshape(-1, 3, 3)


@dataclass
class Projection:
    """Per-Gaussian screen-space state for the compacted (visible) subset."""

    idx: np.ndarray  # indices into the full SplatSet
    mean2d: np.ndarray  # (M, 2) pixel-center coords
    conic: np.ndarray  # (M, 3) packed inverse covariance (a, b, c)
    cov2d: np.ndarray  # (M, 2, 2)
    depth: np.ndarray  # (M,) camera-space z
    opac: np.ndarray  # (M,) activated opacity
    color: np.ndarray  # (M, 3) view-dependent rgb
    radius: np.ndarray  # (M,) conservative pixel radius of the alpha>=1/255 disk
    q_max: np.ndarray  # (M,) exponent bound: q > q_max implies alpha < 1/255
    # intermediates kept for the backward pass
    mu_cam: np.ndarray
    jac: np.ndarray  # (M, 2, 3)
    sigma_world: np.ndarray  # (M, 3, 3)
    rot_g: np.ndarray  # (M, 3, 3)
    q_hat: np.ndarray  # (M, 4) normalized quaternions
    q_norm: np.ndarray  # (M,)
    scales: np.ndarray  # (M, 3)
    view_dir: np.ndarray  # (M, 3)
    view_r: np.ndarray  # (M,)
    color_aff: np.ndarray  # (M, 3) pre-sigmoid color
    n_skipped_singular: int
    n_culled: int


def project_gaussians(
    splats: SplatSet,
    camera: PinholeCamera,
    pose: Pose,
    near: float,
    low_pass: float,
    crop: Optional[Aabb] = None,
) -> Projection:
    n = len(splats)
    rot_wc = pose.rotation_matrix()
    w_cw = rot_wc.T
    t_cw = -w_cw @ pose.trans

    mu_cam_all = splats.means @ w_cw.T + t_cw
    z_all = mu_cam_all[:, 2]
    keep = z_all > near
    if crop is not None:
        keep &= crop.contains(splats.means)
    opac_all = splats.opacities()
    keep &= opac_all > ALPHA_MIN
    idx = np.flatnonzero(keep)

    mu_cam = mu_cam_all[idx]
    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    q_raw = splats.rotations[idx]
    q_norm = np.linalg.norm(q_raw, axis=1)
    q_hat = q_raw / q_norm[:, None]
    rot_g = _quats_to_rotmats(q_hat)
    scales = np.exp(splats.log_scales[idx])
    m = rot_g * scales[:, None, :]
    sigma_world = m @ np.swapaxes(m, 1, 2)
    sigma_cam = w_cw @ sigma_world @ w_cw.T

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * x / (z * z)
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * y / (z * z)
    cov2d = jac @ sigma_cam @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += low_pass
    cov2d[:, 1, 1] += low_pass

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    nonsingular = det > _SINGULAR_DET
    n_skipped = int(np.count_nonzero(~nonsingular))

    idx = idx[nonsingular]
    mu_cam = mu_cam[nonsingular]
    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    q_hat = q_hat[nonsingular]
    q_norm = q_norm[nonsingular]
    rot_g = rot_g[nonsingular]
    scales = scales[nonsingular]
    sigma_world = sigma_world[nonsingular]
    jac = jac[nonsingular]
    cov2d = cov2d[nonsingular]
    det = det[nonsingular]

    conic = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1
    )
    mean2d = np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], axis=1)
    opac = splats.opacities()[idx]

    # radius of the disk where alpha can reach 1/255
    half_trace = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = half_trace + np.sqrt(
        np.maximum(0.0, (0.5 * (cov2d[:, 0, 0] - cov2d[:, 1, 1])) ** 2 + cov2d[:, 0, 1] ** 2)
    )
    q_max = 2.0 * np.log(opac / ALPHA_MIN)
    radius = np.sqrt(q_max * lam_max) + _RADIUS_PAD

    # view-dependent color from the direction camera -> mean (world frame)
    dvec = splats.means[idx] - pose.trans
    view_r = np.linalg.norm(dvec, axis=1)
    view_dir = dvec / view_r[:, None]
    sh = splats.color_sh[idx]
    color_aff = SH_C0 * sh[:, :, 0] + SH_C1 * np.einsum("ncj,nj->nc", sh[:, :, 1:], view_dir)
    color = 1.0 / (1.0 + np.exp(-color_aff))

    return Projection(
        idx=idx,
        mean2d=mean2d,
        conic=conic,
        cov2d=cov2d,
        depth=z.copy(),
        opac=opac,
        color=color,
        radius=radius,
        q_max=q_max,
        mu_cam=mu_cam,
        jac=jac,
        sigma_world=sigma_world,
        rot_g=rot_g,
        q_hat=q_hat,
        q_norm=q_norm,
        scales=scales,
        view_dir=view_dir,
        view_r=view_r,
        color_aff=color_aff,
        n_skipped_singular=n_skipped,
        n_culled=n - len(idx),
    )


def project_gaussian(
    splats: SplatSet, i: int, camera: PinholeCamera, pose: Pose, near: float, low_pass: float
) -> Optional[Tuple[np.ndarray, np.ndarray, float]]:
    """Single-Gaussian projection: (mean2d, cov2d, depth_cam), or None when
    the Gaussian is behind the near plane."""
    single = SplatSet(
        splats.means[i : i + 1].copy(),
        splats.log_scales[i : i + 1].copy(),
        splats.rotations[i : i + 1].copy(),
        np.array([10.0]),  # force opacity past the cull for a pure geometry query
        splats.color_sh[i : i + 1].copy(),
    )
    proj = project_gaussians(single, camera, pose, near, low_pass)
    if len(proj.idx) == 0:
        return None
    return proj.mean2d[0], proj.cov2d[0], float(proj.depth[0])


# ---------------------------------------------------------------------------
# tile binning and rasterization


def _depth_rank(depth: np.ndarray) -> np.ndarray:
    """rank[m] = position of Gaussian m in the front-to-back order; ties
    resolved by original index (stable sort)."""
    order = np.argsort(depth, kind="stable")
    rank = np.empty(len(depth), dtype=np.int64)
    rank[order] = np.arange(len(depth), dtype=np.int64)
    return rank


def _bin_tiles(
    mean2d: np.ndarray,
    radius: np.ndarray,
    rank: np.ndarray,
    width: int,
    height: int,
    tile_size: int,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """CSR tile lists: Gaussian indices grouped by tile, front-to-back."""
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y

    ix_min = np.ceil(mean2d[:, 0] - radius - 0.5).astype(np.int64)
    ix_max = np.floor(mean2d[:, 0] + radius - 0.5).astype(np.int64)
    iy_min = np.ceil(mean2d[:, 1] - radius - 0.5).astype(np.int64)
    iy_max = np.floor(mean2d[:, 1] + radius - 0.5).astype(np.int64)
    ix_min = np.maximum(ix_min, 0)
    iy_min = np.maximum(iy_min, 0)
    ix_max = np.minimum(ix_max, width - 1)
    iy_max = np.minimum(iy_max, height - 1)
    live = (ix_min <= ix_max) & (iy_min <= iy_max)

    tx_min = ix_min // tile_size
    tx_max = ix_max // tile_size
    ty_min = iy_min // tile_size
    ty_max = iy_max // tile_size
    ntx = np.where(live, tx_max - tx_min + 1, 0)
    nty = np.where(live, ty_max - ty_min + 1, 0)
    counts = ntx * nty
    total = int(counts.sum())
    if total == 0:
        return (
            np.zeros(0, dtype=np.int64),
            np.zeros(n_tiles + 1, dtype=np.int64),
            tiles_x,
        )
    g_ids = np.repeat(np.arange(len(mean2d), dtype=np.int64), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    local = np.arange(total, dtype=np.int64) - np.repeat(offsets[:-1], counts)
    tx = tx_min[g_ids] + local % ntx[g_ids]
    ty = ty_min[g_ids] + local // ntx[g_ids]
    tile_ids = ty * tiles_x + tx

    order = np.lexsort((rank[g_ids], tile_ids))
    tile_gauss = g_ids[order]
    per_tile = np.bincount(tile_ids, minlength=n_tiles)
    tile_offsets = np.concatenate([[0], np.cumsum(per_tile)]).astype(np.int64)
    return tile_gauss, tile_offsets, tiles_x


@dataclass(frozen=True)
class RasterStats:
    n_drawn: int
    n_culled: int
    n_skipped_singular: int


def _raster_forward(proj: Projection, camera: PinholeCamera, config: SplatTrainConfig):
    rank = _depth_rank(proj.depth)
    tile_gauss, tile_offsets, tiles_x = _bin_tiles(
        proj.mean2d, proj.radius, rank, camera.width, camera.height, config.tile_size
    )
    bg = np.asarray(config.background_color, dtype=np.float64)
    rgb, depth, alpha, t_end = kernels.splat_forward(
        proj.mean2d,
        proj.conic,
        proj.opac,
        proj.color,
        proj.depth,
        proj.q_max,
        tile_gauss,
        tile_offsets,
        tiles_x,
        camera.width,
        camera.height,
        config.tile_size,
        bg,
        config.far,
        config.transmittance_floor,
        ALPHA_MIN,
        ALPHA_MAX,
    )
    return rgb, depth, alpha, t_end, (tile_gauss, tile_offsets, tiles_x)


def rasterize_with_stats(
    splats: SplatSet,
    camera: PinholeCamera,
    pose: Pose,
    config: SplatTrainConfig,
    crop: Optional[Aabb] = None,
) -> Tuple[RenderProduct, RasterStats]:
    if not camera.rectified:
        raise ValueError("rasterize requires a rectified camera")
    start = time.perf_counter()
    proj = project_gaussians(splats, camera, pose, config.near, config.low_pass, crop)
    rgb, depth, alpha, _, _ = _raster_forward(proj, camera, config)
    product = RenderProduct(
        rgb=np.clip(rgb, 0.0, 1.0),
        depth=depth,
        opacity=alpha,
        render_time=time.perf_counter() - start,
    )
    stats = RasterStats(
        n_drawn=len(proj.idx),
        n_culled=proj.n_culled,
        n_skipped_singular=proj.n_skipped_singular,
    )
    return product, stats


def rasterize(
    splats: SplatSet,
    camera: PinholeCamera,
    pose: Pose,
    config: SplatTrainConfig,
    crop: Optional[Aabb] = None,
) -> RenderProduct:
    return rasterize_with_stats(splats, camera, pose, config, crop)[0]


# ---------------------------------------------------------------------------
# backward: screen-space gradients -> parameter gradients


def _rot_partials(q: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(unit quaternion) for each Gaussian: (M, 4, 3, 3)."""
    w, x, y, z = 2.0 * q[:, 0], 2.0 * q[:, 1], 2.0 * q[:, 2], 2.0 * q[:, 3]
    out = np.zeros((len(q), 4, 3, 3))
    # dR/dw
    out[:, 0, 0, 1] = -z; out[:, 0, 0, 2] = y
    out[:, 0, 1, 0] = z; out[:, 0, 1, 2] = -x
    out[:, 0, 2, 0] = -y; out[:, 0, 2, 1] = x
    # dR/dx
    out[:, 1, 0, 1] = y; out[:, 1, 0, 2] = z
    out[:, 1, 1, 0] = y; out[:, 1, 1, 1] = -2 * x; out[:, 1, 1, 2] = -w
    out[:, 1, 2, 0] = z; out[:, 1, 2, 1] = w; out[:, 1, 2, 2] = -2 * x
    # dR/dy
    out[:, 2, 0, 0] = -2 * y; out[:, 2, 0, 1] = x; out[:, 2, 0, 2] = w
    out[:, 2, 1, 0] = x; out[:, 2, 1, 2] = z
    out[:, 2, 2, 0] = -w; out[:, 2, 2, 1] = z; out[:, 2, 2, 2] = -2 * y
    # dR/dz
    out[:, 3, 0, 0] = -2 * z; out[:, 3, 0, 1] = -w; out[:, 3, 0, 2] = x
    out[:, 3, 1, 0] = w; out[:, 3, 1, 1] = -2 * z; out[:, 3, 1, 2] = y
    out[:, 3, 2, 0] = x; out[:, 3, 2, 1] = y
    return out


def _backward_params(
    splats: SplatSet,
    proj: Projection,
    camera: PinholeCamera,
    pose: Pose,
    g_mean2d: np.ndarray,
    g_conic: np.ndarray,
    g_opac: np.ndarray,
    g_color: np.ndarray,
    g_depth: np.ndarray,
) -> dict:
    """Chain screen-space gradients through projection, covariance
    construction, activations, and quaternion normalization."""
    m = len(proj.idx)
    w_cw = pose.rotation_matrix().T

    # color/sh and the view-direction dependence of color
    dsig = g_color * proj.color * (1.0 - proj.color)  # (M, 3)
    g_sh = np.zeros((m, 3, 4))
    g_sh[:, :, 0] = dsig * SH_C0
    g_sh[:, :, 1:] = SH_C1 * dsig[:, :, None] * proj.view_dir[:, None, :]
    sh = splats.color_sh[proj.idx]
    u = SH_C1 * np.einsum("nc,ncj->nj", dsig, sh[:, :, 1:])  # (M, 3)
    vdotu = np.einsum("nj,nj->n", proj.view_dir, u)
    g_means_vd = (u - proj.view_dir * vdotu[:, None]) / proj.view_r[:, None]

    # conic -> cov2d (inverse of a symmetric 2x2)
    gm = np.empty((m, 2, 2))
    gm[:, 0, 0] = g_conic[:, 0]
    gm[:, 0, 1] = gm[:, 1, 0] = 0.5 * g_conic[:, 1]
    gm[:, 1, 1] = g_conic[:, 2]
    amat = np.empty((m, 2, 2))
    amat[:, 0, 0] = proj.conic[:, 0]
    amat[:, 0, 1] = amat[:, 1, 0] = proj.conic[:, 1]
    amat[:, 1, 1] = proj.conic[:, 2]
    g_cov = -(amat @ gm @ amat)

    # cov2d = J Sigma_cam J^T + lp I
    jac_t = np.swapaxes(proj.jac, 1, 2)
    sigma_cam = w_cw @ proj.sigma_world @ w_cw.T
    g_sigma_cam = jac_t @ g_cov @ proj.jac
    g_jac = 2.0 * (g_cov @ proj.jac @ sigma_cam)
    g_sigma_world = w_cw.T @ g_sigma_cam @ w_cw

    # Sigma = R D R^T with D = diag(s^2)
    dmat = proj.scales**2
    g_rot = 2.0 * (g_sigma_world @ (proj.rot_g * dmat[:, None, :]))
    g_dd_diag = np.sum(proj.rot_g * (g_sigma_world @ proj.rot_g), axis=1)
    g_scales = 2.0 * proj.scales * g_dd_diag
    g_log_scales = g_scales * proj.scales

    # rotation matrix -> raw quaternion (through normalization)
    partials = _rot_partials(proj.q_hat)  # (M, 4, 3, 3)
    g_qhat = (partials.reshape(-1, 4, 9) @ g_rot.reshape(-1, 9, 1))[:, :, 0]
    g_quat = (g_qhat - proj.q_hat * np.einsum("nq,nq->n", g_qhat, proj.q_hat)[:, None]) / (
        proj.q_norm[:, None]
    )

    # mean2d / J / depth -> camera-space mean
    x, y, z = proj.mu_cam[:, 0], proj.mu_cam[:, 1], proj.mu_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    g_mu_cam = np.zeros((m, 3))
    g_mu_cam[:, 0] = g_mean2d[:, 0] * fx * inv_z + g_jac[:, 0, 2] * (-fx * inv_z2)
    g_mu_cam[:, 1] = g_mean2d[:, 1] * fy * inv_z + g_jac[:, 1, 2] * (-fy * inv_z2)
    g_mu_cam[:, 2] = (
        g_mean2d[:, 0] * (-fx * x * inv_z2)
        + g_mean2d[:, 1] * (-fy * y * inv_z2)
        + g_jac[:, 0, 0] * (-fx * inv_z2)
        + g_jac[:, 1, 1] * (-fy * inv_z2)
        + g_jac[:, 0, 2] * (2.0 * fx * x * inv_z2 * inv_z)
        + g_jac[:, 1, 2] * (2.0 * fy * y * inv_z2 * inv_z)
        + g_depth
    )
    g_means = g_mu_cam @ w_cw + g_means_vd

    # opacity activation
    g_opacity_logit = g_opac * proj.opac * (1.0 - proj.opac)

    n = len(splats)
    grads = {
        "means": np.zeros((n, 3)),
        "log_scales": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "opacity_logit": np.zeros(n),
        "color_sh": np.zeros((n, 3, 4)),
    }
    grads["means"][proj.idx] = g_means
    grads["log_scales"][proj.idx] = g_log_scales
    grads["rotations"][proj.idx] = g_quat
    grads["opacity_logit"][proj.idx] = g_opacity_logit
    grads["color_sh"][proj.idx] = g_sh
    return grads


def splat_loss_and_grads(
    splats: SplatSet,
    camera: PinholeCamera,
    pose: Pose,
    target: np.ndarray,
    config: SplatTrainConfig,
    want_grads: bool = True,
):
    """Photometric MSE against one target image, with parameter gradients."""
    proj = project_gaussians(splats, camera, pose, config.near, config.low_pass)
    rgb, _, _, _, tiles = _raster_forward(proj, camera, config)
    n_el = rgb.size
    residual = rgb - target
    loss = float(np.mean(residual * residual))
    if not want_grads:
        return loss, None
    d_rgb = (2.0 / n_el) * residual

    tile_gauss, tile_offsets, tiles_x = tiles
    m = len(proj.idx)
    g_mean2d = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_opac = np.zeros(m)
    g_color = np.zeros((m, 3))
    g_depth = np.zeros(m)
    bg = np.asarray(config.background_color, dtype=np.float64)
    kernels.splat_backward(
        proj.mean2d,
        proj.conic,
        proj.opac,
        proj.color,
        proj.depth,
        proj.q_max,
        tile_gauss,
        tile_offsets,
        tiles_x,
        camera.width,
        camera.height,
        config.tile_size,
        bg,
        config.far,
        config.transmittance_floor,
        ALPHA_MIN,
        ALPHA_MAX,
        d_rgb,
        np.zeros(rgb.shape[:2]),
        np.zeros(rgb.shape[:2]),
        g_mean2d,
        g_conic,
        g_opac,
        g_color,
        g_depth,
    )
    grads = _backward_params(
        splats, proj, camera, pose, g_mean2d, g_conic, g_opac, g_color, g_depth
    )
    return loss, grads


def train_step_splat(
    splats: SplatSet,
    optimizer: Adam,
    entries,  # sequence of (rgb target, camera, pose)
    config: SplatTrainConfig,
    rng_seed: int,
) -> TrainStats:
    """One step on one randomly selected keyframe (deterministic per seed)."""
    if len(entries) == 0:
        raise ValueError("at least one target image required")
    start = time.perf_counter()
    rng = np.random.default_rng(rng_seed)
    target, camera, pose = entries[int(rng.integers(0, len(entries)))]
    loss, grads = splat_loss_and_grads(splats, camera, pose, target, config)
    if not np.isfinite(loss):
        raise TrainStepError(f"non-finite splat loss {loss}; step rejected")
    optimizer.step(grads)
    norms = np.linalg.norm(splats.rotations, axis=1, keepdims=True)
    splats.rotations /= np.where(norms > 1e-12, norms, 1.0)
    return TrainStats(loss, 0.0, time.perf_counter() - start)


def prune(splats: SplatSet, config: SplatTrainConfig, optimizer: Optional[Adam] = None):
    """Remove Gaussians below the opacity threshold, preserving order and
    dropping the matching optimizer state rows."""
    keep = splats.opacities() >= config.prune_opacity_threshold
    removed = int(np.count_nonzero(~keep))
    if removed == 0:
        return splats, 0
    pruned = SplatSet(
        splats.means[keep].copy(),
        splats.log_scales[keep].copy(),
        splats.rotations[keep].copy(),
        splats.opacity_logit[keep].copy(),
        splats.color_sh[keep].copy(),
    )
    if optimizer is not None:
        optimizer.keep_rows(keep)
        optimizer.params = pruned.params()
    return pruned, removed


class SplatBackend:
    """Service-facing wrapper mirroring VoxelBackend."""

    name = "splat"

    def __init__(self, splats: SplatSet, config: SplatTrainConfig):
        self.splats = splats
        self.config = config
        self.optimizer = Adam(
            splats.params(),
            lr=config.lr_dict(),
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
        )
        self.iteration = 0

    @staticmethod
    def from_buffer(
        buffer: KeyframeBuffer, config: SplatTrainConfig, max_count: int = 12000, seed: int = 0
    ) -> "SplatBackend":
        return SplatBackend(init_from_rgbd(buffer, max_count, seed), config)

    def train_step(self, buffer: KeyframeBuffer, seed: int) -> TrainStats:
        # updated entries are drawn first, mirroring the ray-batch sampler
        with buffer.lock:
            count = buffer.count
            if count == 0:
                raise ValueError("empty buffer")
            pool = np.flatnonzero(buffer.updated[:count])
            if len(pool) == 0:
                pool = np.arange(count)
            rng = np.random.default_rng(seed)
            chosen = int(pool[int(rng.integers(0, len(pool)))])
            buffer.updated[chosen] = False
            entry = (buffer.rgb[chosen].copy(), buffer.cameras[chosen], buffer.poses[chosen])
        stats = train_step_splat(self.splats, self.optimizer, [entry], self.config, seed)
        self.iteration += 1
        if self.config.prune_interval > 0 and self.iteration % self.config.prune_interval == 0:
            self.splats, _ = prune(self.splats, self.config, self.optimizer)
        return stats

    def render(self, camera: PinholeCamera, pose: Pose, crop: Optional[Aabb] = None) -> RenderProduct:
        return rasterize(self.splats, camera, pose, self.config, crop)

    def snapshot(self) -> SplatSet:
        return self.splats.copy()

    def save(self, path) -> None:
        self.splats.save(path)
