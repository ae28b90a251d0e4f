import numpy as np
import pytest

from atlasslam.exceptions import PreconditionException
from atlasslam.manifold import Pose, exp_so3
from atlasslam.models import Atlas
from atlasslam.optimizer import (
    BundleAdjustment,
    bias_prior_information,
    global_bundle_adjustment,
    inertial_chain,
    remove_outliers,
)
from atlasslam.sim import WorldSpec, build_reference_map, generate


@pytest.fixture(scope="module")
def world():
    return generate(WorldSpec(duration=2.0, landmarks=1200, stereo=True))


def perturb(keyframe):
    pose = keyframe.pose
    keyframe.state.pose = Pose(
        exp_so3(np.array([0.01, -0.02, 0.015])) @ pose.rotation, pose.translation + np.array([0.03, -0.02, 0.01])
    )
    return pose


def ordered_ids(slam_map):
    return [kf.id for kf in slam_map.ordered_keyframes()]


class TestBundleAdjustment:
    def test_free_keyframe_recovers_pose(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10)
        target = ordered_ids(slam_map)[2]
        truth = perturb(slam_map.keyframes[target])

        problem = BundleAdjustment(slam_map, [target])
        assert problem.free_ids == [target]
        assert target not in problem.fixed_ids
        assert problem.fixed_ids
        assert problem.reprojection_rms() > 1.0
        problem.optimize()
        problem.apply()
        assert problem.reprojection_rms() < 1e-3
        assert np.allclose(slam_map.keyframes[target].pose.translation, truth.translation, atol=1e-5)
        assert np.allclose(slam_map.keyframes[target].pose.rotation, truth.rotation, atol=1e-6)
        assert remove_outliers(slam_map, problem) == 0
        slam_map.validate()

    def test_needs_free_keyframe(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10)
        ids = ordered_ids(slam_map)
        with pytest.raises(PreconditionException):
            BundleAdjustment(slam_map, ids[:1], fixed=ids[:1])

    def test_observers_capped_by_shared_points(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10)
        target = ordered_ids(slam_map)[2]
        points = slam_map.keyframes[target].point_ids()
        shared = {kf: len(slam_map.keyframes[kf].point_ids() & points) for kf in ordered_ids(slam_map) if kf != target}
        truth = perturb(slam_map.keyframes[target])

        problem = BundleAdjustment(slam_map, [target], max_observers=2)
        assert len(problem.fixed_ids) == 2
        dropped = set(shared) - problem.fixed_ids
        assert min(shared[kf] for kf in problem.fixed_ids) >= max(shared[kf] for kf in dropped)
        problem.optimize()
        problem.apply()
        assert np.allclose(slam_map.keyframes[target].pose.translation, truth.translation, atol=1e-5)

    def test_global(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10)
        ids = ordered_ids(slam_map)
        truth = {kf: slam_map.keyframes[kf].pose for kf in ids}
        perturb(slam_map.keyframes[ids[3]])
        result = global_bundle_adjustment(slam_map)
        assert result.chi2 < result.initial_chi2
        for kf in ids:
            assert np.allclose(slam_map.keyframes[kf].pose.translation, truth[kf].translation, atol=1e-5)

    def test_global_single_keyframe(self, world):
        slam_map = build_reference_map(world, Atlas(), stride=10, end=0.0)
        with pytest.raises(PreconditionException):
            global_bundle_adjustment(slam_map)


def test_inertial_chain(world):
    slam_map = build_reference_map(world, Atlas(), stride=10, inertial=True)
    ids = ordered_ids(slam_map)
    assert inertial_chain(slam_map, ids[-1], 3) == ids[-3:]
    assert inertial_chain(slam_map, ids[1], 10) == ids[:2]


def test_bias_prior_information():
    information = bias_prior_information(1e-4, 1e-2)
    assert np.allclose(np.diag(information), [1e4] * 3 + [1e2] * 3)
