import numpy as np
import pytest

from fieldstream.core import FrameSample, PinholeCamera, Pose
from fieldstream.imaging import rgb_to_gray
from fieldstream.ingest import (
    AdmitStatus,
    FilterPolicy,
    KeyframeBuffer,
    ReplayScript,
    SensorRegistry,
    admit_frame,
    blur_score,
    online_mode_ready,
    pose_novelty,
    replay_admit,
    sample_batch,
)


def make_camera(w=32, h=24, rectified=True, distortion=None):
    return PinholeCamera(
        fx=w * 0.9, fy=w * 0.9, cx=w / 2, cy=h / 2, width=w, height=h,
        distortion=np.zeros(4) if distortion is None else distortion,
        rectified=rectified,
    )


def sharp_image(rng, h, w):
    return rng.uniform(0.0, 1.0, size=(h, w, 3))


def make_frame(camera, pose, seq=0, rgb=None, depth=None, cam_id="cam0", t=0.0):
    rng = np.random.default_rng(seq + 77)
    if rgb is None:
        rgb = sharp_image(rng, camera.height, camera.width)
    return FrameSample(
        camera_id=cam_id, seq=seq, timestamp=t, rgb=rgb, depth=depth,
        pose=pose, camera=camera,
    )


def fresh_setup(capacity=8, depth=False, w=32, h=24):
    registry = SensorRegistry()
    registry.register("cam0", make_camera(w, h), depth)
    buffer = KeyframeBuffer.from_registry(capacity, registry)
    return buffer, registry


class TestBlurScore:
    def test_constant_image_is_zero(self):
        assert blur_score(np.full((16, 16, 3), 0.37)) == 0.0

    def test_checkerboard_matches_convolution_oracle(self):
        # 2x2-block checkerboard, scored against a direct convolution
        blocks = np.indices((64, 64)).sum(axis=0) // 2 % 2
        rgb = np.repeat(blocks[:, :, None].astype(float), 3, axis=2)

        gray = rgb_to_gray(rgb)
        kernel = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=float)
        resp = np.zeros((62, 62))
        for y in range(62):
            for x in range(62):
                resp[y, x] = np.sum(gray[y : y + 3, x : x + 3] * kernel)
        expected = float(np.var(resp))

        assert blur_score(rgb) == pytest.approx(expected, abs=1e-9)

    def test_smoothing_lowers_score(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(48, 48, 3))
        # 5x5 box filter
        pad = np.pad(img, ((2, 2), (2, 2), (0, 0)), mode="edge")
        blurred = np.zeros_like(img)
        for dy in range(5):
            for dx in range(5):
                blurred += pad[dy : dy + 48, dx : dx + 48]
        blurred /= 25.0
        assert blur_score(blurred) < blur_score(img)


class TestPoseNovelty:
    def test_identical_pose_is_zero(self):
        buffer, registry = fresh_setup()
        pose = Pose.identity()
        admit_frame(buffer, registry, make_frame(make_camera(), pose), FilterPolicy())
        assert pose_novelty(pose, buffer, 1.0) == pytest.approx(0.0)

    def test_empty_buffer_is_infinite(self):
        buffer, _ = fresh_setup()
        assert pose_novelty(Pose.identity(), buffer, 1.0) == np.inf

    def test_translation_plus_weighted_rotation(self):
        buffer, registry = fresh_setup()
        admit_frame(buffer, registry, make_frame(make_camera(), Pose.identity()), FilterPolicy())
        angle = 0.1
        q = np.array([np.cos(angle / 2), np.sin(angle / 2), 0.0, 0.0])
        cand = Pose(q, np.array([0.2, 0.0, 0.0]))
        assert pose_novelty(cand, buffer, 1.0) == pytest.approx(0.3, abs=1e-9)

    def test_min_over_entries(self):
        buffer, registry = fresh_setup()
        cam = make_camera()
        for i, tx in enumerate([0.0, 1.0, 5.0]):
            admit_frame(
                buffer, registry,
                make_frame(cam, Pose(np.array([1, 0, 0, 0.0]), np.array([tx, 0, 0])), seq=i),
                FilterPolicy(),
            )
        cand = Pose(np.array([1, 0, 0, 0.0]), np.array([1.2, 0, 0]))
        assert pose_novelty(cand, buffer, 1.0) == pytest.approx(0.2)


class TestAdmitFrame:
    def test_first_sharp_frame_admitted_at_zero(self):
        buffer, registry = fresh_setup()
        res = admit_frame(buffer, registry, make_frame(make_camera(), Pose.identity()), FilterPolicy())
        assert res.status is AdmitStatus.ADMITTED
        assert res.index == 0

    def test_duplicate_pose_rejected(self):
        buffer, registry = fresh_setup()
        cam = make_camera()
        policy = FilterPolicy()
        admit_frame(buffer, registry, make_frame(cam, Pose.identity(), seq=0), policy)
        res = admit_frame(buffer, registry, make_frame(cam, Pose.identity(), seq=1), policy)
        assert res.status is AdmitStatus.REJECTED_NOVELTY

    def test_blurry_frame_rejected(self):
        buffer, registry = fresh_setup()
        flat = np.full((24, 32, 3), 0.5)
        res = admit_frame(
            buffer, registry,
            make_frame(make_camera(), Pose.identity(), rgb=flat),
            FilterPolicy(blur_threshold=1e-9),
        )
        assert res.status is AdmitStatus.REJECTED_BLUR

    def test_full_buffer_rejects_without_eviction(self):
        buffer, registry = fresh_setup(capacity=1)
        cam = make_camera()
        policy = FilterPolicy()
        first = admit_frame(buffer, registry, make_frame(cam, Pose.identity(), seq=0), policy)
        assert first.admitted
        novel = Pose(np.array([1, 0, 0, 0.0]), np.array([5.0, 0, 0]))
        res = admit_frame(buffer, registry, make_frame(cam, novel, seq=1), policy)
        assert res.status is AdmitStatus.REJECTED_FULL
        assert buffer.count == 1
        assert buffer.poses[0].trans[0] == pytest.approx(0.0)

    def test_unregistered_camera_errors(self):
        buffer, registry = fresh_setup()
        frame = make_frame(make_camera(), Pose.identity(), cam_id="other")
        with pytest.raises(ValueError):
            admit_frame(buffer, registry, frame, FilterPolicy())

    def test_missing_depth_errors_when_depth_enabled(self):
        buffer, registry = fresh_setup(depth=True)
        with pytest.raises(ValueError):
            admit_frame(buffer, registry, make_frame(make_camera(), Pose.identity()), FilterPolicy())

    def test_stored_metadata_satisfies_thresholds(self):
        buffer, registry = fresh_setup(capacity=16)
        cam = make_camera()
        policy = FilterPolicy(blur_threshold=1e-4, novelty_threshold=0.01)
        rng = np.random.default_rng(9)
        for i in range(12):
            pose = Pose(rng.normal(size=4), rng.normal(size=3))
            admit_frame(buffer, registry, make_frame(cam, pose, seq=i), policy)
        for i in range(buffer.count):
            assert buffer.blur_scores[i] >= policy.blur_threshold
            assert buffer.novelty_scores[i] >= policy.novelty_threshold

    def test_admission_is_order_deterministic(self):
        policy = FilterPolicy(novelty_threshold=0.2)
        rng = np.random.default_rng(4)
        poses = [Pose(rng.normal(size=4), rng.normal(size=3) * 0.3) for _ in range(20)]
        outcomes = []
        for _ in range(2):
            buffer, registry = fresh_setup(capacity=6)
            cam = make_camera()
            run = [
                admit_frame(buffer, registry, make_frame(cam, p, seq=i), policy).status
                for i, p in enumerate(poses)
            ]
            outcomes.append((run, buffer.rgb.copy(), buffer.count))
        assert outcomes[0][0] == outcomes[1][0]
        assert np.array_equal(outcomes[0][1], outcomes[1][1])


class TestMultiCameraResize:
    def test_small_camera_resized_to_canonical(self):
        registry = SensorRegistry()
        registry.register("big", make_camera(64, 48), False)
        registry.register("small", make_camera(32, 24), False)
        buffer = KeyframeBuffer.from_registry(8, registry)
        assert (buffer.width, buffer.height) == (64, 48)
        frame = make_frame(make_camera(32, 24), Pose.identity(), cam_id="small")
        res = admit_frame(buffer, registry, frame, FilterPolicy())
        assert res.admitted
        cam = buffer.cameras[0]
        assert (cam.width, cam.height) == (64, 48)
        assert cam.fx == pytest.approx(frame.camera.fx * 2)

    def test_resize_preserves_back_projection(self):
        # rays through matching pixels of the original and rescaled cameras agree
        from fieldstream.core import ray_for_pixel

        registry = SensorRegistry()
        registry.register("big", make_camera(64, 48), False)
        registry.register("small", make_camera(32, 24), False)
        buffer = KeyframeBuffer.from_registry(8, registry)
        small = make_camera(32, 24)
        admit_frame(buffer, registry, make_frame(small, Pose.identity(), cam_id="small"), FilterPolicy())
        stored = buffer.cameras[0]
        ratio = stored.width / small.width
        pose = Pose.identity()
        for px, py in [(4, 7), (20, 11)]:
            orig = ray_for_pixel(small, pose, px, py)
            scaled = ray_for_pixel(stored, pose, (px + 0.5) * ratio - 0.5, (py + 0.5) * ratio - 0.5)
            assert np.abs(orig.direction - scaled.direction).max() < 1e-6

    def test_depth_enabled_only_when_all_cameras_have_depth(self):
        registry = SensorRegistry()
        registry.register("a", make_camera(), True)
        registry.register("b", make_camera(), False)
        assert not registry.depth_enabled
        registry2 = SensorRegistry()
        registry2.register("a", make_camera(), True)
        assert registry2.depth_enabled


class TestRectification:
    def test_distorted_frame_rectified_on_admission(self):
        # a straight edge stays straight after undistortion of a barrel image
        cam_d = make_camera(48, 36, rectified=False, distortion=np.array([-0.25, 0.05, 0.0, 0.0]))
        buffer, registry = fresh_setup(w=48, h=36)
        registry.sensors["cam0"].camera = cam_d
        rng = np.random.default_rng(3)
        rgb = sharp_image(rng, 36, 48)
        frame = make_frame(cam_d, Pose.identity(), rgb=rgb)
        res = admit_frame(buffer, registry, frame, FilterPolicy(blur_threshold=0.0))
        assert res.admitted
        assert buffer.cameras[0].rectified
        assert np.all(buffer.cameras[0].distortion == 0)


class TestSampleBatch:
    def test_deterministic_given_seed_and_state(self):
        buffer, registry = fresh_setup()
        cam = make_camera()
        admit_frame(buffer, registry, make_frame(cam, Pose.identity()), FilterPolicy())
        b1 = sample_batch(buffer, 4, rng_seed=123)
        buffer.updated[0] = True  # restore state
        b2 = sample_batch(buffer, 4, rng_seed=123)
        assert np.array_equal(b1.origins, b2.origins)
        assert np.array_equal(b1.dirs, b2.dirs)
        assert np.array_equal(b1.rgb, b2.rgb)
        assert np.array_equal(b1.pixels, b2.pixels)

    def test_updated_entries_sampled_first(self):
        buffer, registry = fresh_setup()
        cam = make_camera()
        policy = FilterPolicy()
        admit_frame(buffer, registry, make_frame(cam, Pose.identity(), seq=0), policy)
        far = Pose(np.array([1, 0, 0, 0.0]), np.array([3.0, 0, 0]))
        admit_frame(buffer, registry, make_frame(cam, far, seq=1), policy)
        sample_batch(buffer, 8, rng_seed=0)  # clears both flags
        buffer.updated[1] = True
        batch = sample_batch(buffer, 8, rng_seed=1)
        assert 1 in batch.entry_index
        assert not buffer.updated[1]

    def test_depth_targets_absent_without_depth(self):
        buffer, registry = fresh_setup(depth=False)
        admit_frame(buffer, registry, make_frame(make_camera(), Pose.identity()), FilterPolicy())
        batch = sample_batch(buffer, 4, rng_seed=0)
        assert batch.depth is None

    def test_empty_buffer_errors(self):
        buffer, _ = fresh_setup()
        with pytest.raises(ValueError):
            sample_batch(buffer, 4, rng_seed=0)

    def test_rays_match_stored_cameras(self):
        from fieldstream.core import ray_for_pixel

        buffer, registry = fresh_setup()
        admit_frame(buffer, registry, make_frame(make_camera(), Pose.identity()), FilterPolicy())
        batch = sample_batch(buffer, 6, rng_seed=5)
        for k in range(6):
            e = batch.entry_index[k]
            px, py = batch.pixels[k]
            r = ray_for_pixel(buffer.cameras[e], buffer.poses[e], px, py)
            assert np.abs(r.direction - batch.dirs[k]).max() < 1e-12


class TestReplay:
    def test_membership_admits_and_skips(self):
        buffer, registry = fresh_setup()
        cam = make_camera()
        script = ReplayScript([("cam0", 7)])
        r1 = replay_admit(buffer, registry, make_frame(cam, Pose.identity(), seq=7), script)
        assert r1.status is AdmitStatus.ADMITTED
        r2 = replay_admit(buffer, registry, make_frame(cam, Pose.identity(), seq=8), script)
        assert r2.status is AdmitStatus.SKIPPED

    def test_replay_bypasses_filters(self):
        buffer, registry = fresh_setup()
        cam = make_camera()
        flat = np.full((24, 32, 3), 0.5)  # would fail any blur filter
        script = ReplayScript([("cam0", 0), ("cam0", 1)])
        r = replay_admit(buffer, registry, make_frame(cam, Pose.identity(), seq=0, rgb=flat), script)
        assert r.admitted
        # duplicate pose would fail novelty
        r = replay_admit(buffer, registry, make_frame(cam, Pose.identity(), seq=1, rgb=flat), script)
        assert r.admitted

    def test_full_buffer_still_rejects(self):
        buffer, registry = fresh_setup(capacity=1)
        cam = make_camera()
        script = ReplayScript([("cam0", 0), ("cam0", 1)])
        replay_admit(buffer, registry, make_frame(cam, Pose.identity(), seq=0), script)
        r = replay_admit(buffer, registry, make_frame(cam, Pose.identity(), seq=1), script)
        assert r.status is AdmitStatus.REJECTED_FULL

    def test_two_replays_byte_identical(self):
        rng = np.random.default_rng(8)
        cam = make_camera()
        frames = [
            make_frame(cam, Pose(rng.normal(size=4), rng.normal(size=3)), seq=i)
            for i in range(10)
        ]
        script = ReplayScript([("cam0", i) for i in range(0, 10, 2)])
        buffers = []
        for _ in range(2):
            buffer, registry = fresh_setup()
            for f in frames:
                replay_admit(buffer, registry, f, script)
            buffers.append(buffer)
        assert buffers[0].count == buffers[1].count == 5
        assert buffers[0].rgb.tobytes() == buffers[1].rgb.tobytes()

    def test_script_file_roundtrip(self, tmp_path):
        script = ReplayScript([("cam0", 3), ("cam1", 11)])
        path = tmp_path / "ids.txt"
        script.save(path)
        loaded = ReplayScript.from_file(path)
        assert loaded.pairs == script.pairs


class TestOnlineModeReady:
    @pytest.mark.parametrize("admitted,size,expect", [(4, 5, False), (5, 5, True), (1, 1, True)])
    def test_threshold(self, admitted, size, expect):
        buffer, registry = fresh_setup(capacity=16)
        cam = make_camera()
        policy = FilterPolicy(novelty_threshold=0.0, initial_batch_size=size)
        rng = np.random.default_rng(1)
        for i in range(admitted):
            pose = Pose(rng.normal(size=4), rng.normal(size=3))
            assert admit_frame(buffer, registry, make_frame(cam, pose, seq=i), policy).admitted
        assert online_mode_ready(buffer, policy) is expect
