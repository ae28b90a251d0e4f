import logging

import numpy as np
import pytest

from atlasslam.config import Association, RunConfig, SensorMode, TrackingConfig
from atlasslam.exceptions import PreconditionException
from atlasslam.imu import ImuSample, NavState, preintegrate
from atlasslam.manifold import Pose
from atlasslam.models import Atlas, Keyframe, Keypoint, MapPoint
from atlasslam.pipeline import (
    Frame,
    ImuBuffer,
    System,
    Tracker,
    TrackingState,
    TrackingStatus,
    pair_keypoints,
    redundant,
    stereo_points,
)
from atlasslam.sim import WorldSpec, build_reference_map, generate


def oracle(mode: SensorMode) -> RunConfig:
    return RunConfig(mode=mode, tracking=TrackingConfig(association=Association.ORACLE))


@pytest.fixture(scope="module")
def world():
    return generate(WorldSpec(duration=2.0, landmarks=1200, stereo=True))


def samples(start, end, count=21):
    return [ImuSample(t, np.zeros(3), [0.0, 0.0, 9.81]) for t in np.linspace(start, end, count)]


class TestTrackingStatus:
    def test_starts_lost(self):
        status = TrackingStatus()
        assert status.state is TrackingState.LOST
        assert status.time_in_state(3.0) == 0.0
        status.start(1.0)
        status.start(2.0)
        assert status.time_in_state(3.0) == 2.0

    def test_transitions(self, caplog):
        status = TrackingStatus()
        status.start(0.0)
        with caplog.at_level(logging.INFO, logger="atlasslam.pipeline.frame"):
            status.transition(TrackingState.OK, 1.0)
        assert "lost -> ok" in caplog.text
        status.transition(TrackingState.OK, 2.0)
        assert status.since == 1.0
        status.transition("recently-lost", 3.0)
        status.transition(TrackingState.LOST, 8.0)
        assert status.state is TrackingState.LOST
        assert status.time_in_state(9.5) == 1.5

    def test_no_skipping(self):
        status = TrackingStatus(TrackingState.OK)
        with pytest.raises(PreconditionException) as e:
            status.transition(TrackingState.LOST, 1.0)
        assert e.value.context == {"from": "ok", "to": "lost"}
        with pytest.raises(PreconditionException):
            TrackingStatus().transition(TrackingState.RECENTLY_LOST, 1.0)


class TestFrame:
    def test_empty(self, rig):
        frame = Frame(0.5, [], rig)
        assert frame.descriptors().shape == (0, 32)
        assert frame.tracked == 0
        assert np.allclose(frame.pose.translation, 0.0)

    def test_descriptors(self, rig, rng):
        keypoints = [Keypoint((1.0, 2.0), rng.integers(0, 256, 32)) for _ in range(4)]
        assert Frame(0.5, keypoints, rig).descriptors().shape == (4, 32)


class TestImuBuffer:
    def test_out_of_order(self):
        buffer = ImuBuffer()
        buffer.extend(samples(0.0, 1.0))
        buffer.extend(samples(0.9, 1.1, 3))
        assert len(buffer) == 22
        assert buffer.samples[-1].timestamp == 1.1

    def test_preintegrate(self):
        buffer = ImuBuffer()
        assert buffer.preintegrate(0.0, 1.0) is None
        buffer.extend(samples(0.0, 1.0))
        assert buffer.preintegrate(0.5, 0.5) is None
        pre = buffer.preintegrate(0.12, 0.58)
        assert np.isclose(pre.delta_time, 0.46)
        assert np.allclose(pre.delta_velocity, [0.0, 0.0, 9.81 * 0.46])

    def test_discard_keeps_one_before(self):
        buffer = ImuBuffer()
        buffer.extend(samples(0.0, 1.0))
        buffer.discard_before(0.52)
        assert np.isclose(buffer.samples[0].timestamp, 0.5)
        assert len(buffer.between(0.52, 0.88)) == 9


class TestTracker:
    def test_integrate(self):
        state = NavState(Pose(), [1.0, 0.0, 0.0])
        predicted = Tracker.integrate(state, preintegrate(samples(0.0, 1.0)))
        assert np.allclose(predicted.velocity, [1.0, 0.0, 0.0])
        assert np.allclose(predicted.pose.translation, [1.0, 0.0, 0.0])
        assert np.allclose(predicted.pose.rotation, np.eye(3))

    def test_tracks_reference_map(self, world):
        atlas = Atlas()
        slam_map = build_reference_map(world, atlas, stride=10, end=1.0)
        tracker = Tracker(atlas, oracle(SensorMode.STEREO))
        last = max(slam_map.keyframes.values(), key=lambda kf: kf.timestamp)
        tracker.anchor(last)

        truth = world.session.frames[22]
        frame = Frame(truth.timestamp, truth.keypoints, world.session.rig)
        tracked = tracker.track(frame, slam_map)
        assert tracked >= 15
        assert np.allclose(frame.pose.translation, truth.truth.pose.translation, atol=1e-4)
        assert np.allclose(frame.pose.rotation, truth.truth.pose.rotation, atol=1e-5)
        assert tracker.last_frame is frame

        keyframe = tracker.create_keyframe(frame, slam_map)
        assert tracker.reference_id == keyframe.id
        assert keyframe.points == frame.matches
        slam_map.validate()

    def test_registers_without_motion_model(self, world):
        atlas = Atlas()
        slam_map = build_reference_map(world, atlas, stride=10, end=1.0)
        tracker = Tracker(atlas, RunConfig(mode=SensorMode.STEREO))
        tracker.anchor(max(slam_map.keyframes.values(), key=lambda kf: kf.timestamp))

        # half a second after the anchor, far outside the projection search window
        truth = world.session.frames[30]
        frame = Frame(truth.timestamp, truth.keypoints, world.session.rig)
        assert tracker.track(frame, slam_map) >= 15
        assert np.allclose(frame.pose.translation, truth.truth.pose.translation, atol=1e-4)
        assert np.allclose(frame.pose.rotation, truth.truth.pose.rotation, atol=1e-4)

    def test_motion_model_cleared_after_lost_frame(self, world):
        atlas = Atlas()
        slam_map = build_reference_map(world, atlas, stride=10, end=1.0)
        tracker = Tracker(atlas, oracle(SensorMode.STEREO))
        tracker.anchor(max(slam_map.keyframes.values(), key=lambda kf: kf.timestamp))
        for index in (21, 22):
            truth = world.session.frames[index]
            tracker.track(Frame(truth.timestamp, truth.keypoints, world.session.rig), slam_map)

        moving = Frame(world.session.frames[23].timestamp, [], world.session.rig)
        tracker.predict(moving, slam_map)
        assert not np.allclose(moving.pose.translation, tracker.last_frame.pose.translation)

        assert tracker.track(moving, slam_map) == 0
        following = Frame(world.session.frames[24].timestamp, [], world.session.rig)
        tracker.predict(following, slam_map)
        assert np.allclose(following.pose.translation, tracker.last_frame.pose.translation)
        assert np.allclose(following.pose.rotation, tracker.last_frame.pose.rotation)


class TestMappingHelpers:
    def test_pair_by_landmark(self):
        descriptor = np.zeros(32)
        first = [(0, Keypoint((0, 0), descriptor, landmark=3)), (1, Keypoint((0, 0), descriptor, landmark=5))]
        second = [(4, Keypoint((0, 0), descriptor, landmark=5)), (7, Keypoint((0, 0), descriptor))]
        assert pair_keypoints(first, second, Association.ORACLE) == [(1, 4)]
        assert pair_keypoints(first, [], Association.ORACLE) == []

    def test_pair_by_descriptor(self, rng):
        descriptors = rng.integers(0, 256, (6, 32))
        first = [(i, Keypoint((0, 0), d)) for i, d in enumerate(descriptors)]
        second = [(10 + i, Keypoint((0, 0), d)) for i, d in enumerate(descriptors[::-1])]
        pairs = pair_keypoints(first, second, Association.DESCRIPTOR)
        assert sorted(pairs) == [(i, 15 - i) for i in range(6)]

    def test_redundant(self, atlas, rig):
        slam_map = atlas.active
        for k in range(10):
            slam_map.add_point(MapPoint(atlas.new_point_id(), np.ones(3), np.zeros(32)))
        keyframes = []
        for t in range(4):
            keyframe = Keyframe(atlas.new_keyframe_id(), float(t), NavState(), rig, [Keypoint((0, 0), np.zeros(32))] * 10)
            keyframe.points = {index: index for index in range(10)}
            keyframes.append(atlas.insert_keyframe(keyframe))
        assert redundant(slam_map, keyframes[0], 3, 0.9)
        assert not redundant(slam_map, keyframes[0], 4, 0.9)

    def test_stereo_points(self, world):
        frame = world.session.frames[0]
        config = oracle(SensorMode.STEREO)
        pose = frame.truth.pose
        found = stereo_points(frame.keypoints, world.session.rig, pose, config)
        assert len(found) >= 30
        for left, right, point in found:
            landmark = frame.keypoints[left].landmark
            assert frame.keypoints[right].landmark == landmark
            assert np.allclose(point, world.landmarks[landmark], atol=1e-6)

    def test_no_stereo_on_mono_rig(self, rig, config):
        assert stereo_points([], rig, Pose(), config) == []


class TestSystem:
    def test_stereo_session_stays_tracked(self, world):
        system = System(RunConfig(mode=SensorMode.STEREO), world.session.rig)
        system.run(world.session.frames[:41])
        states = [row[1] for row in system.status_rows]
        assert len(states) == 41
        assert states.count("ok") > 0.9 * len(states)
        system.atlas.validate()

    def test_lost_without_observations(self, world):
        system = System(oracle(SensorMode.STEREO), world.session.rig)
        system.process_frame(0.0, [])
        assert system.status.state is TrackingState.LOST
        assert system.status_rows == [(0.0, "lost", 0.0, 0, None)]
        assert system.trajectory() == []

    def test_stereo_initialization(self, world):
        system = System(oracle(SensorMode.STEREO), world.session.rig)
        frame = world.session.frames[0]
        system.process_frame(frame.timestamp, frame.keypoints)
        assert system.status.state is TrackingState.OK
        assert len(system.atlas.active.keyframes) == 1
        assert len(system.atlas.active.points) >= 30
        (timestamp, pose), = system.trajectory()
        assert timestamp == 0.0
        assert np.allclose(pose.translation, 0.0)
        system.atlas.validate()
