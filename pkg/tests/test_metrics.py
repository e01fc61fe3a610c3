import numpy as np
import pytest

from fieldstream.metrics import psnr, ssim


def reference_psnr(a, b):
    # independent straight-line reimplementation
    diff = np.asarray(a, dtype=float).ravel() - np.asarray(b, dtype=float).ravel()
    mse = float(np.dot(diff, diff) / diff.size)
    if mse == 0:
        return 99.0
    return 10.0 * np.log10(1.0 / mse)


def reference_ssim_luma(a, b):
    """Independent SSIM: explicit per-window loops on the luma channel."""
    lum = np.array([0.299, 0.587, 0.114])
    x = a @ lum if a.ndim == 3 else a
    y = b @ lum if b.ndim == 3 else b
    half = 5
    coords = np.arange(11) - 5.0
    g = np.exp(-(coords**2) / (2 * 1.5**2))
    win = np.outer(g, g)
    win /= win.sum()
    c1 = (0.01) ** 2
    c2 = (0.03) ** 2
    vals = []
    for cy in range(half, x.shape[0] - half):
        for cx in range(half, x.shape[1] - half):
            wx = x[cy - half : cy + half + 1, cx - half : cx + half + 1]
            wy = y[cy - half : cy + half + 1, cx - half : cx + half + 1]
            mx = (wx * win).sum()
            my = (wy * win).sum()
            vx = (wx * wx * win).sum() - mx * mx
            vy = (wy * wy * win).sum() - my * my
            vxy = (wx * wy * win).sum() - mx * my
            vals.append(
                ((2 * mx * my + c1) * (2 * vxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(vals))


class TestPsnr:
    def test_identical_images_capped(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert psnr(img, img) == 99.0

    def test_constant_offset_analytic(self):
        a = np.full((16, 16, 3), 0.4)
        b = np.full((16, 16, 3), 0.5)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_matches_reference_on_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            a = rng.uniform(size=(13, 17, 3))
            b = rng.uniform(size=(13, 17, 3))
            assert psnr(a, b) == pytest.approx(reference_psnr(a, b), abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(9, 9, 3))
        b = rng.uniform(size=(9, 9, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


class TestSsim:
    def test_identical_is_one(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_negative_image_scores_low(self):
        rng = np.random.default_rng(4)
        img = np.where(rng.uniform(size=(24, 24, 3)) > 0.5, 0.9, 0.1)
        assert ssim(img, 1.0 - img) < 0.5

    def test_matches_reference(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(18, 15, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(reference_ssim_luma(a, b), abs=1e-6)

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))

    def test_bounded(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(size=(20, 20, 3))
        b = rng.uniform(size=(20, 20, 3))
        assert -1.0 <= ssim(a, b) <= 1.0
