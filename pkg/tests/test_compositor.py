import numpy as np
import pytest

from fieldstream.compositor import (
    OverlayLayer,
    composite_cutout,
    composite_occlude,
    depth_to_zbuffer,
    zbuffer_to_depth,
)
from fieldstream.core import RenderProduct


def projection_matrix_zbuffer(z_eye, near, far):
    """Oracle: run the point through a standard GL perspective projection
    and remap NDC z from [-1, 1] to [0, 1]."""
    a = -(far + near) / (far - near)
    b = -2.0 * far * near / (far - near)
    # GL looks down -z; a point at eye depth z_eye has z_gl = -z_eye
    clip_z = a * (-z_eye) + b
    clip_w = z_eye
    ndc = clip_z / clip_w
    return (ndc + 1.0) / 2.0


def make_render(depth, rgb_val=0.25):
    h, w = depth.shape
    return RenderProduct(
        rgb=np.full((h, w, 3), rgb_val),
        depth=depth,
        opacity=np.ones((h, w)),
    )


def make_overlay(depth, mask, rgb_val=0.75):
    h, w = depth.shape
    return OverlayLayer(rgb=np.full((h, w, 3), rgb_val), mask=mask, depth=depth)


class TestDepthToZbuffer:
    def test_near_plane_is_zero(self):
        assert depth_to_zbuffer(0.1, 0.1, 100.0) == pytest.approx(0.0, abs=1e-15)

    def test_far_plane_is_one(self):
        assert depth_to_zbuffer(100.0, 0.1, 100.0) == pytest.approx(1.0, abs=1e-12)

    def test_matches_projection_matrix_oracle_value(self):
        d = depth_to_zbuffer(1.0, 0.1, 100.0)
        assert d == pytest.approx(0.9009009009009, abs=1e-9)
        assert d == pytest.approx(projection_matrix_zbuffer(1.0, 0.1, 100.0), abs=1e-9)

    def test_matches_oracle_over_random_triples(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            near = rng.uniform(0.01, 1.0)
            far = near + rng.uniform(0.5, 100.0)
            z = rng.uniform(near, far)
            assert depth_to_zbuffer(z, near, far) == pytest.approx(
                projection_matrix_zbuffer(z, near, far), abs=1e-9
            )

    def test_strictly_monotonic(self):
        zs = np.linspace(0.1, 50.0, 5000)
        d = depth_to_zbuffer(zs, 0.1, 50.0)
        assert np.all(np.diff(d) > 0)

    def test_roundtrip(self):
        zs = np.linspace(0.2, 80.0, 1000)
        back = zbuffer_to_depth(depth_to_zbuffer(zs, 0.2, 80.0), 0.2, 80.0)
        assert np.abs(back - zs).max() / zs.max() < 1e-7

    def test_clamps_outside_range(self):
        assert depth_to_zbuffer(0.01, 0.1, 10.0) == 0.0
        assert depth_to_zbuffer(99.0, 0.1, 10.0) == 1.0

    def test_invalid_planes_rejected(self):
        with pytest.raises(ValueError):
            depth_to_zbuffer(1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            zbuffer_to_depth(0.5, 2.0, 1.0)


class TestCompositeOcclude:
    def test_nearer_overlay_wins(self):
        render = make_render(np.full((4, 4), 2.0))
        overlay = make_overlay(np.full((4, 4), 1.0), np.ones((4, 4), bool))
        out = composite_occlude(render, overlay, 0.1, 100.0)
        assert np.all(out == 0.75)

    def test_farther_overlay_hidden(self):
        render = make_render(np.full((4, 4), 2.0))
        overlay = make_overlay(np.full((4, 4), 3.0), np.ones((4, 4), bool))
        out = composite_occlude(render, overlay, 0.1, 100.0)
        assert np.all(out == 0.25)

    def test_tie_goes_to_overlay(self):
        render = make_render(np.full((4, 4), 2.0))
        overlay = make_overlay(np.full((4, 4), 2.0), np.ones((4, 4), bool))
        out = composite_occlude(render, overlay, 0.1, 100.0)
        assert np.all(out == 0.75)

    def test_winner_agrees_between_spaces(self):
        # z-buffer comparison must pick the same winner as eye-space
        rng = np.random.default_rng(1)
        n = 1_000_000
        near = rng.uniform(0.01, 1.0, size=n)
        far = near + rng.uniform(0.5, 100.0, size=n)
        z1 = rng.uniform(near, far)
        z2 = rng.uniform(near, far)
        d1 = near * far * 0  # placeholder to keep vectorized formula visible
        d1 = far * (z1 - near) / (z1 * (far - near))
        d2 = far * (z2 - near) / (z2 * (far - near))
        strict = np.abs(z1 - z2) > 1e-9
        assert np.array_equal((d1 < d2)[strict], (z1 < z2)[strict])

    def test_dimension_mismatch_errors(self):
        render = make_render(np.full((4, 4), 2.0))
        overlay = make_overlay(np.full((5, 4), 1.0), np.ones((5, 4), bool))
        with pytest.raises(ValueError):
            composite_occlude(render, overlay, 0.1, 100.0)

    def test_background_render_shows_masked_overlay(self):
        far = 50.0
        render = make_render(np.full((6, 6), far))
        mask = np.zeros((6, 6), bool)
        mask[2:4, 1:5] = True
        overlay = make_overlay(np.full((6, 6), 5.0), mask)
        out = composite_occlude(render, overlay, 0.1, far)
        assert np.all(out[mask] == 0.75)
        assert np.all(out[~mask] == 0.25)


class TestCompositeCutout:
    def test_empty_mask_keeps_render(self):
        render = make_render(np.full((4, 4), 2.0))
        overlay = make_overlay(np.full((4, 4), 1.0), np.zeros((4, 4), bool))
        assert np.all(composite_cutout(render, overlay) == 0.25)

    def test_full_mask_shows_overlay(self):
        render = make_render(np.full((4, 4), 2.0))
        overlay = make_overlay(np.full((4, 4), 9.0), np.ones((4, 4), bool))
        assert np.all(composite_cutout(render, overlay) == 0.75)

    def test_modes_diverge_for_far_overlay(self):
        render = make_render(np.full((4, 4), 2.0))
        overlay = make_overlay(np.full((4, 4), 30.0), np.ones((4, 4), bool))
        cut = composite_cutout(render, overlay)
        occ = composite_occlude(render, overlay, 0.1, 100.0)
        assert np.all(cut == 0.75)
        assert np.all(occ == 0.25)
