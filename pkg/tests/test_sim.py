import numpy as np
import pytest

from atlasslam.exceptions import InvalidArgumentException, InvalidSpecException
from atlasslam.imu import inertial_residual
from atlasslam.manifold import Pose, SimTransform, exp_so3
from atlasslam.models import Atlas
from atlasslam.sim import (
    TrajectoryKind,
    WorldSpec,
    build_reference_map,
    default_rig,
    flip_bits,
    generate,
    inject_drift,
    path_length,
)


@pytest.fixture(scope="module")
def world():
    return generate(
        WorldSpec(duration=2.0, landmarks=800, gyro_bias=[0.01, -0.02, 0.005], accel_bias=[0.05, 0.0, -0.03])
    )


class TestWorldSpec:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"duration": -1.0},
            {"landmarks": 0},
            {"pixel_noise": -0.5},
            {"flip_rate": 0.5},
            {"imu_rate": 10.0},
            {"gyro_bias": [0.0, 0.0]},
            {"trajectory": "spiral"},
        ],
    )
    def test_invalid(self, overrides):
        with pytest.raises(InvalidSpecException):
            WorldSpec(**overrides).validate()

    def test_kind_from_string(self):
        assert WorldSpec(trajectory="corridor").validate().trajectory is TrajectoryKind.CORRIDOR

    def test_noise_defaults(self):
        noise = WorldSpec(gyro_noise=0.002).imu_noise()
        assert noise.gyro_noise == 0.002
        assert noise.accel_noise > 0


class TestGenerate:
    def test_streams(self, world):
        session = world.session
        assert len(session.frames) == 41
        assert len(session.imu) == 401
        assert np.isclose(session.imu[-1].timestamp, 2.0)
        assert np.allclose(session.timestamps[:3], [0.0, 0.05, 0.1])
        assert len(session.truth()) == 41

    def test_exact_observations(self, world):
        session = world.session
        for frame in session.frames[::10]:
            assert len(frame.keypoints) > 10
            for keypoint in frame.keypoints:
                x_cam = session.rig.world_to_camera(
                    frame.truth.pose, world.landmarks[keypoint.landmark][None], keypoint.camera
                )
                uv, valid = session.rig.cameras[keypoint.camera].project_many(x_cam)
                assert valid[0]
                assert np.allclose(uv[0], keypoint.uv)
                assert np.array_equal(keypoint.descriptor, world.descriptors[keypoint.landmark])

    def test_imu_consistent_with_truth(self, world):
        session = world.session
        first, last = session.frames[4], session.frames[9]
        pre = session.preintegrate(first.timestamp, last.timestamp, first.truth.bias)
        residual, _ = inertial_residual(first.truth, last.truth, pre, session.gravity)
        assert np.linalg.norm(residual) < 1e-2

    def test_seeded(self):
        spec = dict(duration=0.5, landmarks=100, gyro_noise=0.01, pixel_noise=1.0, seed=3)
        a, b = generate(WorldSpec(**spec)), generate(WorldSpec(**spec))
        assert np.array_equal(a.landmarks, b.landmarks)
        assert np.array_equal(a.session.imu[7].gyro, b.session.imu[7].gyro)
        c = generate(WorldSpec(**{**spec, "seed": 4}))
        assert not np.array_equal(a.session.imu[7].gyro, c.session.imu[7].gyro)

    def test_two_sessions(self):
        world = generate(WorldSpec(trajectory=TrajectoryKind.TWO_SESSION, duration=0.5, landmarks=100))
        assert len(world.sessions) == 2
        start_a = world.sessions[0].frames[0].truth.pose.translation
        start_b = world.sessions[1].frames[0].truth.pose.translation
        assert np.allclose(start_a[:2], [5.0, 0.0])
        assert np.allclose(start_b[:2], [0.0, 5.0])

    def test_occlusion(self):
        world = generate(WorldSpec(duration=1.0, landmarks=300, occlusions=[(0.2, 0.4)]))
        blind = [frame.timestamp for frame in world.session.frames if not frame.keypoints]
        assert np.allclose(blind, [0.2, 0.25, 0.3, 0.35])

    def test_stereo(self):
        world = generate(WorldSpec(duration=0.2, landmarks=300, stereo=True))
        assert world.session.rig.is_stereo
        assert {kp.camera for kp in world.session.frames[0].keypoints} == {0, 1}


def test_flip_bits(rng):
    descriptors = rng.integers(0, 256, (500, 32), dtype=np.uint8)
    assert np.array_equal(flip_bits(descriptors, 0.0, rng), descriptors)
    flipped = flip_bits(descriptors, 0.2, rng)
    fraction = np.unpackbits(flipped ^ descriptors).mean()
    assert 0.18 < fraction < 0.22


def test_default_rig():
    rig = default_rig(stereo=True)
    assert len(rig.cameras) == 2
    assert np.isclose(rig.baseline, 0.11, atol=1e-3)
    # the camera looks along the body x axis
    assert np.allclose(rig.camera_to_body(0).rotation @ [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])


class TestDrift:
    def poses(self):
        return [Pose(translation=np.array([float(k), 0.0, 0.0])) for k in range(11)]

    def test_path_length(self):
        assert np.isclose(path_length(self.poses()), 10.0)

    def test_final_gap(self):
        drifted = inject_drift(self.poses(), 0.02, direction=(0.0, 2.0, 0.0))
        assert np.allclose(drifted[0].translation, [0.0, 0.0, 0.0])
        assert np.allclose(drifted[-1].translation, [10.0, 0.2, 0.0])

    def test_rotation_drift(self):
        drifted = inject_drift(self.poses(), 0.0, rotation_rate=0.01)
        assert np.allclose(drifted[-1].rotation, exp_so3(np.array([0.0, 0.0, 0.1])))

    def test_negative(self):
        with pytest.raises(InvalidArgumentException):
            inject_drift(self.poses(), -0.1)


class TestReferenceMap:
    def test_from_truth(self, world):
        atlas = Atlas()
        slam_map = build_reference_map(world, atlas, stride=10)
        assert len(slam_map.keyframes) == 5
        assert atlas.active is slam_map
        for point in slam_map.points.values():
            assert np.allclose(point.position, world.landmarks[point.landmark])
        slam_map.validate()

    def test_transformed(self, world):
        transform = SimTransform(2.0, exp_so3(np.array([0.0, 0.0, 0.5])), np.array([1.0, 0.0, 0.0]))
        atlas = Atlas()
        slam_map = build_reference_map(world, atlas, stride=10, transform=transform, inertial=True, end=1.0)
        assert len(slam_map.keyframes) == 3
        assert slam_map.imu_initialized
        first, second = sorted(slam_map.keyframes.values(), key=lambda kf: kf.timestamp)[:2]
        assert first.preintegrated is None
        assert np.isclose(second.preintegrated.delta_time, 0.5)
        point = next(iter(slam_map.points.values()))
        assert np.allclose(point.position, transform.act(world.landmarks[point.landmark]))

    def test_scaled_map_reprojects_like_truth(self, world):
        session = world.sessions[0]
        truth = {frame.timestamp: frame.truth.pose for frame in session.frames}
        transform = SimTransform(1.5, exp_so3(np.array([0.2, -0.1, 0.7])), np.array([0.0, 3.0, -1.0]))
        slam_map = build_reference_map(world, Atlas(), stride=10, transform=transform)
        checked = 0
        for keyframe in slam_map.keyframes.values():
            for index, point_id in keyframe.points.items():
                if keyframe.keypoints[index].camera != 0:
                    continue
                point = slam_map.points[point_id]
                expected = session.rig.project(truth[keyframe.timestamp], world.landmarks[point.landmark], 0)
                pixel = session.rig.project(keyframe.pose, point.position, 0)
                assert np.allclose(pixel, expected, atol=1e-6)
                checked += 1
        assert checked > 0
