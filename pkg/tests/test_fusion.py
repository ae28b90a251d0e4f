import csv

import numpy as np
import pytest

from atlasslam.exceptions import PreconditionException
from atlasslam.evaluation import align_trajectories
from atlasslam.fusion import (
    EventLog,
    FusionEvent,
    PoseGraphProblem,
    build_welding_window,
    close_loop,
    merge_maps,
    optimize_essential_graph,
    welding_ba,
)
from atlasslam.manifold import Pose, SimTransform, exp_so3
from atlasslam.models import Atlas, Keyframe, MapPoint
from atlasslam.placerec import PlaceHypothesis, PlaceRecognizer, build_local_window
from atlasslam.sim import WorldSpec, build_reference_map, generate

from .conftest import overlapping_maps


@pytest.fixture(scope="module")
def world():
    return generate(WorldSpec(duration=2.0, landmarks=1200, stereo=True))


def ordered_ids(slam_map):
    return [kf.id for kf in slam_map.ordered_keyframes()]


class TestEventLog:
    def test_csv(self, tmp_path):
        log = EventLog()
        log.append(FusionEvent(12.5, "merge", 40, 3, 11, 1234.5678, 12.0))
        log.append(FusionEvent(30.0, "loop", 80, 9, 7, 50.0, 2.5, global_ba=True))
        assert log.count("merge") == 1 and len(log) == 2
        path = tmp_path / "events.csv"
        log.write_csv(path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == EventLog.HEADER
        assert rows[1] == ["12.500000000", "merge", "40", "3", "11", "1234.57", "12", ""]
        assert rows[2][-1] == "1"

    def test_empty(self, tmp_path):
        EventLog().write_csv(tmp_path / "events.csv")
        assert (tmp_path / "events.csv").read_text().strip() == ",".join(EventLog.HEADER)


class TestWeldingWindow:
    def test_visual(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10)
        ids = ordered_ids(slam_map)
        window = build_welding_window(slam_map, ids[-1], ids[0], covisibles=2)
        assert window.active_ids[0] == ids[-1]
        assert len(window.keyframe_ids) == len(set(window.keyframe_ids))
        assert ids[0] in window.keyframe_ids
        assert window.point_ids()

    def test_inertial(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=5, inertial=True)
        ids = ordered_ids(slam_map)
        window = build_welding_window(slam_map, ids[-1], ids[4], inertial=True, chain_length=2)
        assert window.active_ids == ids[-3:]
        assert window.matched_ids == ids[2:5]
        assert window.fixed_ids == {ids[2]}
        assert window.free_ids == ids[-3:] + ids[3:5]


class TestPoseGraph:
    def test_restores_relative_poses(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10)
        ids = ordered_ids(slam_map)
        truth = {kf: slam_map.keyframes[kf].pose for kf in ids}
        for k, kf in enumerate(ids[1:], start=1):
            pose = truth[kf]
            slam_map.keyframes[kf].state.pose = Pose(
                exp_so3(np.array([0.0, 0.0, 0.01 * k])) @ pose.rotation, pose.translation + 0.02 * k
            )
        problem = PoseGraphProblem(slam_map, [ids[0]], reference=truth)
        corrected = optimize_essential_graph(problem)
        for kf in ids:
            assert np.allclose(corrected[kf].translation, truth[kf].translation, atol=1e-5)
            assert np.allclose(slam_map.keyframes[kf].pose.rotation, truth[kf].rotation, atol=1e-6)

    def test_similarity_nodes(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10)
        ids = ordered_ids(slam_map)
        truth = {kf: slam_map.keyframes[kf].pose for kf in ids}
        slam_map.keyframes[ids[2]].state.pose = Pose(truth[ids[2]].rotation, truth[ids[2]].translation + 0.1)
        corrected = optimize_essential_graph(PoseGraphProblem(slam_map, [ids[0]], reference=truth, similarity=True))
        assert np.allclose(corrected[ids[2]].translation, truth[ids[2]].translation, atol=1e-5)

    def test_needs_fixed_keyframe(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10)
        with pytest.raises(PreconditionException):
            PoseGraphProblem(slam_map, []).validate()

    def test_current_edges_use_current_poses(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10)
        ids = ordered_ids(slam_map)
        slam_map.add_loop_edge(ids[0], ids[-1])
        reference = {kf: slam_map.keyframes[kf].pose for kf in ids}
        reference[ids[-1]] = Pose(reference[ids[-1]].rotation, reference[ids[-1]].translation + 0.5)
        problem = PoseGraphProblem(slam_map, [ids[0]], reference=reference, current=[(ids[-1], ids[0])])
        measured = {(a, b): relative for a, b, relative in problem.edges}
        truth = slam_map.keyframes[ids[0]].pose.inverse().compose(slam_map.keyframes[ids[-1]].pose)
        assert np.allclose(measured[(ids[0], ids[-1])].translation, truth.translation)
        drifted = [edge for edge in measured if ids[-1] in edge and edge != (ids[0], ids[-1])]
        assert drifted
        for a, b in drifted:
            expected = reference[a].inverse().compose(reference[b])
            assert np.allclose(measured[(a, b)].translation, expected.translation)


def camera_positions(slam_map, truth):
    """Estimated and true first-camera centres by keyframe id."""
    estimated, expected = [], []
    for keyframe in slam_map.ordered_keyframes():
        estimated.append(keyframe.camera_pose(0).translation)
        expected.append(keyframe.rig.camera_pose(truth[keyframe.timestamp], 0).translation)
    return np.array(estimated), np.array(expected)


def sim3_rmse(slam_map, truth):
    estimate = [(kf.timestamp, kf.pose) for kf in slam_map.ordered_keyframes()]
    transform, source, target = align_trajectories(estimate, sorted(truth.items()), True)
    return float(np.sqrt(np.mean(np.sum((transform.act(source) - target) ** 2, axis=1))))


class TestWeldingBA:
    def test_restores_perturbed_keyframe(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10)
        ids = ordered_ids(slam_map)
        truth = slam_map.keyframes[ids[-1]].pose
        slam_map.keyframes[ids[-1]].state.pose = Pose(truth.rotation, truth.translation + [0.02, -0.01, 0.01])
        window = build_welding_window(slam_map, ids[-1], ids[0], covisibles=1)
        result = welding_ba(window)
        assert result.chi2 < result.initial_chi2
        assert np.allclose(slam_map.keyframes[ids[-1]].pose.translation, truth.translation, atol=1e-4)
        slam_map.validate()


WARP = SimTransform(1.5, exp_so3(np.array([0.02, -0.01, 0.4])), np.array([1.0, -2.0, 0.5]))


@pytest.fixture(scope="module")
def mono_world():
    return generate(WorldSpec(duration=3.0, landmarks=1200))


class TestMergeMaps:
    def test_merges_scaled_map(self, mono_world):
        atlas, matched_map, active_map, matched, active = overlapping_maps(mono_world, WARP)
        truth = {frame.timestamp: frame.truth.pose for frame in mono_world.session.frames}
        hypothesis = PlaceRecognizer(atlas).hypothesize(active, matched.id, estimate_scale=True)
        assert np.isclose(hypothesis.transform.scale, WARP.scale, rtol=1e-2)
        active_ids = set(active_map.keyframes)
        log = EventLog()
        merged = merge_maps(atlas, hypothesis, log=log)
        assert merged == matched_map.id
        assert len(atlas) == 1 and atlas.active_id == merged
        slam_map = atlas.maps[merged]
        assert active_ids <= set(slam_map.keyframes)
        assert active.id in slam_map.keyframes[matched.id].loop_ids
        estimated, expected = camera_positions(slam_map, truth)
        assert np.allclose(estimated, expected, atol=1e-3)
        assert log.count("merge") == 1
        slam_map.validate()

    def test_same_map_is_not_a_merge(self, mono_world):
        atlas, matched_map, _, matched, _ = overlapping_maps(mono_world, WARP)
        other = next(kf for kf in matched_map.keyframes.values() if kf.id != matched.id)
        window = build_local_window(matched_map, matched.id)
        hypothesis = PlaceHypothesis(other.id, matched_map.id, window, SimTransform.identity(), True)
        with pytest.raises(PreconditionException):
            merge_maps(atlas, hypothesis)


def drifted_loop_map(world, split=10.0, yaw_rate=0.0005, shift_rate=0.003):
    """A map of one lap whose second half drifts and holds its own copies of the landmarks.

    Returns the atlas, the map and the true body poses by timestamp.
    """
    session = world.session
    atlas = Atlas()
    atlas.new_active_map()
    slam_map = atlas.active
    truth = {}
    copies = {False: {}, True: {}}
    for step, frame in enumerate(session.frames[::10]):
        late = frame.timestamp >= split
        amount = step - int(split * 2) + 1 if late else 0
        yaw = exp_so3(np.array([0.0, 0.0, yaw_rate * amount]))
        drift = SimTransform(1.0, yaw, shift_rate * amount * np.array([1.0, 0.5, 0.0]))
        state = frame.truth.copy()
        state.pose = drift.transform_pose(state.pose)
        keyframe = Keyframe(atlas.new_keyframe_id(), frame.timestamp, state, session.rig, frame.keypoints)
        known = copies[late]
        for index, keypoint in enumerate(frame.keypoints):
            landmark = keypoint.landmark
            if landmark not in known:
                position = drift.act(world.landmarks[landmark])
                point = MapPoint(atlas.new_point_id(), position, world.descriptors[landmark], keyframe.id, landmark)
                slam_map.add_point(point)
                known[landmark] = point.id
            keyframe.points[index] = known[landmark]
        atlas.insert_keyframe(keyframe)
        truth[frame.timestamp] = frame.truth.pose
    for point in slam_map.points.values():
        point.update_descriptor(slam_map.keyframes)
    return atlas, slam_map, truth


@pytest.fixture(scope="module")
def lap_world():
    return generate(WorldSpec(duration=20.5, landmarks=1200))


class TestCloseLoop:
    def test_reduces_drift(self, lap_world):
        atlas, slam_map, truth = drifted_loop_map(lap_world)
        first = slam_map.ordered_keyframes()[0]
        revisit = next(kf for kf in slam_map.keyframes.values() if np.isclose(kf.timestamp, 20.0))
        assert first.id not in revisit.covisibility
        before = sim3_rmse(slam_map, truth)
        hypothesis = PlaceRecognizer(atlas).hypothesize(revisit, first.id, estimate_scale=False)
        assert not hypothesis.is_merge
        log = EventLog()
        event = close_loop(slam_map, hypothesis, log=log)
        assert event.kind == "loop" and event.global_ba
        assert log.count("loop") == 1
        assert first.id in revisit.loop_ids
        after = sim3_rmse(slam_map, truth)
        assert after * 10.0 < before
        slam_map.validate()

    def test_needs_same_map(self, mono_world):
        atlas, _, active_map, matched, active = overlapping_maps(mono_world, WARP)
        window = build_local_window(atlas.map_of(matched.id), matched.id)
        hypothesis = PlaceHypothesis(active.id, active_map.id, window, WARP, True)
        with pytest.raises(PreconditionException):
            close_loop(active_map, hypothesis)
