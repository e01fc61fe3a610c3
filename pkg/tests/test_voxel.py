import math
import struct

import numpy as np
import pytest

from fieldstream.core import Aabb, PinholeCamera, Pose
from fieldstream.ingest import RayBatch
from fieldstream.optim import Adam, TrainStepError
from fieldstream.voxel import (
    VoxelBackend,
    VoxelGrid,
    VoxelTrainConfig,
    render_image,
    render_rays,
    train_step_voxel,
    voxel_loss,
)

BOUNDS = Aabb(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


def make_batch(rng, n, origin_z=-3.0, with_depth=False):
    origins = np.tile(np.array([0.0, 0.0, origin_z]), (n, 1)) + rng.normal(size=(n, 3)) * 0.2
    dirs = np.array([0.0, 0.0, 1.0]) + rng.normal(size=(n, 3)) * 0.25
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return RayBatch(
        origins=origins,
        dirs=dirs,
        rgb=rng.uniform(size=(n, 3)),
        depth=rng.uniform(2.0, 4.0, size=n) if with_depth else None,
        entry_index=np.zeros(n, dtype=np.int64),
        pixels=np.zeros((n, 2), dtype=np.int64),
    )


def random_grid(rng, res=(6, 5, 7), scale=0.5):
    grid = VoxelGrid(res, BOUNDS)
    grid.density_raw = rng.normal(size=grid.density_raw.shape) * scale
    grid.sh = rng.normal(size=grid.sh.shape) * scale
    return grid


class TestSampleField:
    def test_zero_parameters(self):
        grid = VoxelGrid((4, 4, 4), BOUNDS)
        sigma, rgb = grid.sample_field(np.array([[0.1, 0.2, -0.3]]), np.array([0.0, 0.0, 1.0]))
        assert sigma[0] == pytest.approx(math.log(2.0), abs=1e-6)  # softplus(0)
        assert np.allclose(rgb[0], 0.5)

    def test_outside_bounds(self):
        grid = VoxelGrid((4, 4, 4), BOUNDS, init_density=3.0)
        sigma, rgb = grid.sample_field(
            np.array([[2.0, 0.0, 0.0]]), np.array([0.0, 0.0, 1.0]), background=(0.1, 0.2, 0.3)
        )
        assert sigma[0] == 0.0
        assert np.allclose(rgb[0], [0.1, 0.2, 0.3])

    def test_exact_cell_center_no_blending(self):
        rng = np.random.default_rng(0)
        grid = random_grid(rng, res=(5, 6, 7))
        i, j, k = 2, 3, 4
        center = grid.bounds.lo + (np.array([i, j, k]) + 0.5) * grid.cell
        d = np.array([0.3, -0.5, 0.8])
        d /= np.linalg.norm(d)
        sigma, rgb = grid.sample_field(center[None, :], d)
        expect_sigma = math.log1p(math.exp(grid.density_raw[i, j, k]))
        assert sigma[0] == pytest.approx(expect_sigma, rel=1e-12)
        coeffs = grid.sh[i, j, k].reshape(3, 4)
        aff = coeffs[:, 0] + coeffs[:, 1:] @ d
        assert np.allclose(rgb[0], 1.0 / (1.0 + np.exp(-aff)), atol=1e-12)


class TestRenderRay:
    def test_zero_density_gives_background(self):
        grid = VoxelGrid((4, 4, 4), BOUNDS, init_density=-60.0)
        cfg = VoxelTrainConfig(near=0.1, far=8.0, background_color=(0.2, 0.4, 0.6))
        origins = np.array([[0.0, 0.0, -4.0]])
        dirs = np.array([[0.0, 0.0, 1.0]])
        rgb, depth, opac, tend = render_rays(grid, origins, dirs, cfg)
        assert np.allclose(rgb[0], [0.2, 0.4, 0.6], atol=1e-10)
        assert depth[0] == pytest.approx(8.0, rel=1e-6)
        assert opac[0] == pytest.approx(0.0, abs=1e-10)

    def test_constant_medium_matches_quadrature_oracle(self):
        raw = 0.4
        sigma = math.log1p(math.exp(raw))
        k0 = 1.2
        color = 1.0 / (1.0 + math.exp(-k0))
        grid = VoxelGrid((4, 4, 4), BOUNDS, init_density=raw)
        grid.sh[..., 0] = k0
        grid.sh[..., 4] = k0
        grid.sh[..., 8] = k0
        bg = (0.15, 0.25, 0.35)
        cfg = VoxelTrainConfig(near=0.1, far=10.0, samples_per_ray=64, background_color=bg)
        origins = np.array([[0.0, 0.0, -3.0]])
        dirs = np.array([[0.0, 0.0, 1.0]])
        rgb, depth, opac, _ = render_rays(grid, origins, dirs, cfg)

        # closed form over the [2, 4] segment
        L = 2.0
        expect = (1.0 - math.exp(-sigma * L)) * color + math.exp(-sigma * L) * bg[0]
        assert rgb[0, 0] == pytest.approx(expect, abs=1e-3)

        # fine quadrature oracle with 10_000 samples
        n = 10_000
        delta = L / n
        T = 1.0
        acc = 0.0
        alpha = 1.0 - math.exp(-sigma * delta)
        for _ in range(n):
            acc += T * alpha * color
            T *= 1.0 - alpha
        oracle = acc + T * bg[0]
        assert rgb[0, 0] == pytest.approx(oracle, abs=1e-3)

    def test_crop_excluding_scene_gives_background(self):
        rng = np.random.default_rng(1)
        grid = random_grid(rng)
        cfg = VoxelTrainConfig(near=0.1, far=10.0, background_color=(0.9, 0.1, 0.2))
        crop = Aabb(np.array([5.0, 5.0, 5.0]), np.array([6.0, 6.0, 6.0]))
        origins = np.array([[0.0, 0.0, -3.0]])
        dirs = np.array([[0.0, 0.0, 1.0]])
        rgb, depth, opac, _ = render_rays(grid, origins, dirs, cfg, crop=crop)
        assert np.allclose(rgb[0], [0.9, 0.1, 0.2])
        assert opac[0] == 0.0

    def test_conservation_and_depth_bounds(self):
        rng = np.random.default_rng(2)
        grid = random_grid(rng, scale=1.5)
        cfg = VoxelTrainConfig(near=0.3, far=9.0, samples_per_ray=48)
        n = 500
        origins = rng.normal(size=(n, 3)) * 2.0
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rgb, depth, opac, tend = render_rays(grid, origins, dirs, cfg)
        assert np.abs(opac + tend - 1.0).max() < 1e-5
        assert np.all(depth <= cfg.far + 1e-9)
        assert np.all(depth >= cfg.near - 1e-9)

    def test_crop_monotonicity(self):
        rng = np.random.default_rng(3)
        grid = random_grid(rng, scale=1.0)
        cfg = VoxelTrainConfig(near=0.1, far=10.0)
        n = 200
        origins = rng.normal(size=(n, 3)) * 2.5
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        crop = Aabb(np.array([-0.5, -0.6, -0.4]), np.array([0.7, 0.5, 0.6]))
        _, _, opac_full, _ = render_rays(grid, origins, dirs, cfg)
        _, _, opac_crop, _ = render_rays(grid, origins, dirs, cfg, crop=crop)
        assert np.all(opac_crop <= opac_full + 1e-9)


class TestRenderImage:
    def test_zero_grid_2x2(self):
        grid = VoxelGrid((4, 4, 4), BOUNDS, init_density=-60.0)
        cfg = VoxelTrainConfig(background_color=(0.3, 0.3, 0.3), far=5.0)
        cam = PinholeCamera(fx=2, fy=2, cx=1, cy=1, width=2, height=2)
        prod = render_image(grid, cam, Pose.identity(), cfg)
        assert np.allclose(prod.rgb, 0.3)
        assert np.all(prod.opacity == 0)

    def test_bitwise_deterministic(self):
        rng = np.random.default_rng(4)
        grid = random_grid(rng)
        cfg = VoxelTrainConfig()
        cam = PinholeCamera(fx=8, fy=8, cx=4, cy=4, width=8, height=8)
        pose = Pose(np.array([0.9, 0.1, 0.2, 0.1]), np.array([0.0, 0.0, -3.0]))
        p1 = render_image(grid, cam, pose, cfg)
        p2 = render_image(grid, cam, pose, cfg)
        assert p1.rgb.tobytes() == p2.rgb.tobytes()
        assert p1.depth.tobytes() == p2.depth.tobytes()

    def test_half_resolution_consistency(self):
        # smooth low-frequency grid: the half-res render approximates the
        # box-downsampled full render
        from fieldstream.core import scale_camera

        rng = np.random.default_rng(5)
        grid = VoxelGrid((6, 6, 6), BOUNDS)
        grid.density_raw = rng.normal(size=grid.density_raw.shape) * 0.3
        grid.sh = rng.normal(size=grid.sh.shape) * 0.3
        cfg = VoxelTrainConfig()
        cam = PinholeCamera(fx=24, fy=24, cx=16, cy=16, width=32, height=32)
        pose = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, -3.5]))
        full = render_image(grid, cam, pose, cfg)
        half = render_image(grid, scale_camera(cam, 0.5), pose, cfg)
        down = full.rgb.reshape(16, 2, 16, 2, 3).mean(axis=(1, 3))
        assert np.abs(half.rgb - down).mean() < 0.1


class TestTrainStep:
    def test_no_depth_targets_zero_depth_loss(self):
        rng = np.random.default_rng(6)
        grid = random_grid(rng)
        cfg = VoxelTrainConfig(depth_loss_weight=0.0)
        opt = Adam({"density": grid.density_raw, "sh": grid.sh}, lr=cfg.step_size)
        stats = train_step_voxel(grid, opt, make_batch(rng, 16), cfg)
        assert stats.depth_loss == 0.0

    def test_descent_direction(self):
        rng = np.random.default_rng(7)
        grid = random_grid(rng)
        cfg = VoxelTrainConfig(step_size=1e-3)
        batch = make_batch(rng, 8, with_depth=True)
        loss_before = voxel_loss(grid, batch, cfg)
        opt = Adam({"density": grid.density_raw, "sh": grid.sh}, lr=1e-3)
        train_step_voxel(grid, opt, batch, cfg)
        loss_after = voxel_loss(grid, batch, cfg)
        assert loss_after < loss_before

    def test_gradient_check_vs_finite_differences(self):
        rng = np.random.default_rng(8)
        grid = random_grid(rng)
        cfg = VoxelTrainConfig(samples_per_ray=24, depth_loss_weight=0.2, near=0.2, far=6.0)
        batch = make_batch(rng, 12, with_depth=True)

        from fieldstream import kernels
        from fieldstream.voxel import _loss_and_upstream, _ray_intervals

        t0, t1 = _ray_intervals(grid, batch.origins, batch.dirs, None, cfg.near, cfg.far)
        bg = np.asarray(cfg.background_color)
        rgb, depth, opac, _ = kernels.voxel_forward(
            grid.density_raw, grid.sh, grid.bounds.lo, grid.cell,
            batch.origins, batch.dirs, t0, t1, cfg.samples_per_ray, bg, cfg.far,
        )
        _, _, d_rgb, d_depth = _loss_and_upstream(rgb, depth, batch, cfg.depth_loss_weight)
        gd = np.zeros_like(grid.density_raw)
        gs = np.zeros_like(grid.sh)
        kernels.voxel_backward(
            grid.density_raw, grid.sh, grid.bounds.lo, grid.cell,
            batch.origins, batch.dirs, t0, t1, cfg.samples_per_ray, bg, cfg.far,
            d_rgb, d_depth, np.zeros(len(batch)), gd, gs,
        )
        eps = 1e-4
        checked = 0
        for trial in range(200):
            if checked >= 20:
                break
            if trial % 2 == 0:
                idx = tuple(rng.integers(0, s) for s in grid.density_raw.shape)
                arr, g = grid.density_raw, gd[idx]
            else:
                idx = tuple(rng.integers(0, s) for s in grid.sh.shape)
                arr, g = grid.sh, gs[idx]
            if abs(g) < 1e-9:
                continue
            orig = arr[idx]
            arr[idx] = orig + eps
            lp = voxel_loss(grid, batch, cfg)
            arr[idx] = orig - eps
            lm = voxel_loss(grid, batch, cfg)
            arr[idx] = orig
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - g) / max(abs(fd), abs(g)) < 1e-3, (idx, fd, g)
            checked += 1
        assert checked >= 20

    def test_nonfinite_loss_rejected_params_unchanged(self):
        rng = np.random.default_rng(9)
        grid = random_grid(rng)
        cfg = VoxelTrainConfig()
        batch = make_batch(rng, 4)
        bad = RayBatch(
            origins=batch.origins, dirs=batch.dirs,
            rgb=np.full_like(batch.rgb, np.inf), depth=None,
            entry_index=batch.entry_index, pixels=batch.pixels,
        )
        before_d = grid.density_raw.copy()
        before_s = grid.sh.copy()
        opt = Adam({"density": grid.density_raw, "sh": grid.sh}, lr=0.1)
        with pytest.raises(TrainStepError):
            train_step_voxel(grid, opt, bad, cfg)
        assert np.array_equal(grid.density_raw, before_d)
        assert np.array_equal(grid.sh, before_s)

    def test_parameters_finite_after_steps(self):
        rng = np.random.default_rng(10)
        grid = random_grid(rng)
        cfg = VoxelTrainConfig(step_size=0.3)
        opt = Adam({"density": grid.density_raw, "sh": grid.sh}, lr=cfg.step_size)
        for i in range(10):
            train_step_voxel(grid, opt, make_batch(np.random.default_rng(i), 32, with_depth=True), cfg)
        assert np.all(np.isfinite(grid.density_raw))
        assert np.all(np.isfinite(grid.sh))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        grid = random_grid(rng, res=(4, 5, 6))
        path = tmp_path / "voxel.ckpt"
        grid.save(path)
        loaded = VoxelGrid.load(path)
        assert loaded.resolution == grid.resolution
        assert np.allclose(loaded.bounds.lo, grid.bounds.lo)
        assert np.array_equal(loaded.density_raw, grid.density_raw.astype(np.float32).astype(np.float64))
        assert np.array_equal(loaded.sh, grid.sh.astype(np.float32).astype(np.float64))

    def test_header_and_x_fastest_layout(self, tmp_path):
        grid = VoxelGrid((2, 2, 2), BOUNDS)
        grid.density_raw = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
        path = tmp_path / "voxel.ckpt"
        grid.save(path)
        raw = path.read_bytes()
        assert raw[:4] == b"VOXF"
        (version,) = struct.unpack("<H", raw[4:6])
        assert version == 1
        nx, ny, nz = struct.unpack("<III", raw[6:18])
        assert (nx, ny, nz) == (2, 2, 2)
        dens = np.frombuffer(raw[18 + 48 : 18 + 48 + 32], dtype="<f4")
        # x varies fastest: first two entries are (0,0,0) and (1,0,0)
        assert dens[0] == grid.density_raw[0, 0, 0]
        assert dens[1] == grid.density_raw[1, 0, 0]

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            VoxelGrid.load(p)
