import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldstream.core import (
    Aabb,
    FrameSample,
    PinholeCamera,
    Pose,
    Ray,
    camera_rays,
    geodesic_angle,
    ray_aabb_clip,
    ray_for_pixel,
    rays_for_pixels,
    scale_camera,
)


def random_pose(rng):
    q = rng.normal(size=4)
    return Pose(q, rng.normal(size=3))


class TestPose:
    def test_quaternion_renormalized(self):
        p = Pose(np.array([2.0, 0.0, 0.0, 0.0]), np.zeros(3))
        assert abs(np.linalg.norm(p.quat) - 1.0) < 1e-9

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        ident = p.compose(p.inverse())
        assert geodesic_angle(ident.quat, np.array([1.0, 0, 0, 0])) < 1e-9
        assert np.linalg.norm(ident.trans) < 1e-9

    def test_apply_inverse_roundtrip_100_points(self):
        rng = np.random.default_rng(1)
        p = random_pose(rng)
        pts = rng.normal(size=(100, 3)) * 5.0
        back = p.inverse().apply(p.apply(pts))
        assert np.abs(back - pts).max() < 1e-7

    @settings(deadline=None, max_examples=30)
    @given(st.integers(0, 2**32 - 1))
    def test_roundtrip_property(self, seed):
        rng = np.random.default_rng(seed)
        p = random_pose(rng)
        pts = rng.normal(size=(10, 3))
        assert np.abs(p.inverse().apply(p.apply(pts)) - pts).max() < 1e-7

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            Pose(np.zeros(4), np.zeros(3))


class TestPinholeCamera:
    def test_invariants(self):
        with pytest.raises(ValueError):
            PinholeCamera(fx=-1, fy=1, cx=0, cy=0, width=2, height=2)
        with pytest.raises(ValueError):
            PinholeCamera(fx=1, fy=1, cx=5, cy=0, width=2, height=2)

    def test_rectified_zeroes_distortion(self):
        cam = PinholeCamera(
            fx=10, fy=10, cx=5, cy=5, width=10, height=10,
            distortion=np.array([0.1, 0.2, 0.3, 0.4]), rectified=True,
        )
        assert np.all(cam.distortion == 0)

    def test_unrectified_keeps_distortion(self):
        cam = PinholeCamera(
            fx=10, fy=10, cx=5, cy=5, width=10, height=10,
            distortion=np.array([0.1, 0.2, 0.3, 0.4]), rectified=False,
        )
        assert np.allclose(cam.distortion, [0.1, 0.2, 0.3, 0.4])


class TestScaleCamera:
    def test_identity_fraction(self):
        cam = PinholeCamera(fx=100, fy=90, cx=50, cy=40, width=100, height=80)
        s = scale_camera(cam, 1.0)
        assert (s.width, s.height, s.fx, s.fy) == (100, 80, 100, 90)

    def test_exact_halving(self):
        cam = PinholeCamera(fx=800, fy=800, cx=500, cy=400, width=1000, height=800)
        s = scale_camera(cam, 0.5)
        assert (s.width, s.height) == (500, 400)
        assert s.fx == pytest.approx(400.0)

    def test_floor_arithmetic(self):
        cam = PinholeCamera(fx=500, fy=450, cx=512, cy=384, width=1024, height=768)
        s = scale_camera(cam, 0.1)
        assert (s.width, s.height) == (102, 76)
        # realized ratio, not the requested fraction
        assert s.fx == pytest.approx(500 * 102 / 1024)
        assert s.fy == pytest.approx(450 * 76 / 768)

    def test_inverse_ratio_recovers_exactly(self):
        cam = PinholeCamera(fx=100, fy=100, cx=50, cy=40, width=100, height=80)
        s = scale_camera(cam, 0.5)
        r = scale_camera(
            PinholeCamera(fx=s.fx, fy=s.fy, cx=s.cx, cy=s.cy, width=100, height=80),
            1.0,
        )
        assert (r.width, r.height) == (100, 80)

    def test_fraction_out_of_range(self):
        cam = PinholeCamera(fx=10, fy=10, cx=5, cy=5, width=10, height=10)
        with pytest.raises(ValueError):
            scale_camera(cam, 0.0)
        with pytest.raises(ValueError):
            scale_camera(cam, 1.5)


class TestRayForPixel:
    def setup_method(self):
        self.cam = PinholeCamera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)

    def test_principal_point_maps_to_optical_axis(self):
        r = ray_for_pixel(self.cam, Pose.identity(), 49.5, 49.5)
        assert np.allclose(r.direction, [0, 0, 1], atol=1e-12)

    def test_edge_pixel_direction(self):
        r = ray_for_pixel(self.cam, Pose.identity(), 99.5, 49.5)
        expect = np.array([0.5, 0.0, 1.0])
        expect /= np.linalg.norm(expect)
        assert np.allclose(r.direction, expect, atol=1e-4)
        assert r.direction[0] == pytest.approx(0.4472, abs=1e-4)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        pose = random_pose(rng)
        s = scale_camera(self.cam, 0.5)
        ratio = s.width / self.cam.width
        for px, py in [(10, 20), (80, 3), (49.5, 49.5)]:
            r_full = ray_for_pixel(self.cam, pose, px, py)
            r_scaled = ray_for_pixel(s, pose, (px + 0.5) * ratio - 0.5, (py + 0.5) * ratio - 0.5)
            assert np.abs(r_full.direction - r_scaled.direction).max() < 1e-9

    def test_out_of_bounds_pixel_rejected(self):
        with pytest.raises(ValueError):
            ray_for_pixel(self.cam, Pose.identity(), 100.0, 10.0)
        with pytest.raises(ValueError):
            ray_for_pixel(self.cam, Pose.identity(), -0.5, 10.0)

    def test_unit_norm_for_all_pixels(self):
        rng = np.random.default_rng(3)
        cam = PinholeCamera(fx=55.3, fy=61.2, cx=17.4, cy=12.9, width=40, height=30)
        _, dirs = camera_rays(cam, random_pose(rng))
        norms = np.linalg.norm(dirs, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-12

    def test_origin_is_pose_translation(self):
        rng = np.random.default_rng(4)
        pose = random_pose(rng)
        r = ray_for_pixel(self.cam, pose, 10, 10)
        assert np.allclose(r.origin, pose.trans)


class TestRayAabbClip:
    def test_frontal_hit(self):
        ray = Ray(np.array([0.0, 0.0, -5.0]), np.array([0.0, 0.0, 1.0]))
        box = Aabb(np.array([-1.0, -1, -1]), np.array([1.0, 1, 1]))
        assert ray_aabb_clip(ray, box) == pytest.approx((4.0, 6.0))

    def test_origin_inside_clamps_to_zero(self):
        ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]))
        box = Aabb(np.array([-1.0, -1, -1]), np.array([1.0, 1, 1]))
        assert ray_aabb_clip(ray, box) == pytest.approx((0.0, 1.0))

    def test_pointing_away_misses(self):
        ray = Ray(np.array([0.0, 0.0, -5.0]), np.array([0.0, 0.0, -1.0]))
        box = Aabb(np.array([-1.0, -1, -1]), np.array([1.0, 1, 1]))
        assert ray_aabb_clip(ray, box) is None

    def test_interval_endpoints_on_boundary(self):
        rng = np.random.default_rng(5)
        box = Aabb(np.array([-1.0, -2, -3]), np.array([2.0, 1, 3]))
        hits = 0
        for _ in range(200):
            o = rng.normal(size=3) * 4
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            res = ray_aabb_clip(Ray(o, d), box)
            if res is None:
                continue
            hits += 1
            t0, t1 = res
            for t in (t0, t1):
                p = o + t * d
                inside_or_on = np.all(p >= box.lo - 1e-6) and np.all(p <= box.hi + 1e-6)
                on_boundary = np.any(
                    (np.abs(p - box.lo) < 1e-6) | (np.abs(p - box.hi) < 1e-6)
                )
                assert inside_or_on
                assert on_boundary or (t == 0.0 and box.contains(o))
        assert hits > 10

    def test_axis_parallel_ray(self):
        ray = Ray(np.array([0.5, 0.5, -4.0]), np.array([0.0, 0.0, 1.0]))
        box = Aabb(np.array([0.0, 0.0, 0.0]), np.array([1.0, 1.0, 1.0]))
        assert ray_aabb_clip(ray, box) == pytest.approx((4.0, 5.0))


class TestFrameSample:
    def _cam(self):
        return PinholeCamera(fx=10, fy=10, cx=4, cy=3, width=8, height=6)

    def test_dimension_check(self):
        with pytest.raises(ValueError):
            FrameSample(
                camera_id="c", seq=0, timestamp=0.0,
                rgb=np.zeros((4, 8, 3)), depth=None,
                pose=Pose.identity(), camera=self._cam(),
            )

    def test_negative_depth_rejected(self):
        with pytest.raises(ValueError):
            FrameSample(
                camera_id="c", seq=0, timestamp=0.0,
                rgb=np.zeros((6, 8, 3)), depth=np.full((6, 8), -1.0),
                pose=Pose.identity(), camera=self._cam(),
            )

    def test_nonfinite_depth_rejected(self):
        depth = np.zeros((6, 8))
        depth[0, 0] = np.nan
        with pytest.raises(ValueError):
            FrameSample(
                camera_id="c", seq=0, timestamp=0.0,
                rgb=np.zeros((6, 8, 3)), depth=depth,
                pose=Pose.identity(), camera=self._cam(),
            )

    def test_valid_frame(self):
        f = FrameSample(
            camera_id="c", seq=3, timestamp=1.0,
            rgb=np.zeros((6, 8, 3)), depth=np.ones((6, 8)),
            pose=Pose.identity(), camera=self._cam(),
        )
        assert f.seq == 3
        assert not f.rgb.flags.writeable


class TestAabb:
    def test_ordering_enforced(self):
        with pytest.raises(ValueError):
            Aabb(np.array([1.0, 0, 0]), np.array([0.0, 1, 1]))

    def test_contains(self):
        box = Aabb(np.zeros(3), np.ones(3))
        assert box.contains(np.array([0.5, 0.5, 0.5]))
        assert not box.contains(np.array([1.5, 0.5, 0.5]))


class TestVectorizedRays:
    def test_matches_scalar(self):
        rng = np.random.default_rng(6)
        cam = PinholeCamera(fx=31.0, fy=29.0, cx=10.0, cy=11.0, width=20, height=22)
        pose = random_pose(rng)
        px = rng.uniform(0, 19, size=12)
        py = rng.uniform(0, 21, size=12)
        origins, dirs = rays_for_pixels(cam, pose, px, py)
        for i in range(12):
            r = ray_for_pixel(cam, pose, px[i], py[i])
            assert np.abs(dirs[i] - r.direction).max() < 1e-12
            assert np.allclose(origins[i], r.origin)
