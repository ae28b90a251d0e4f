import csv

import numpy as np
import pytest

from atlasslam.config import SensorMode
from atlasslam.evaluation import (
    AlignmentKind,
    EvalReport,
    InitTrial,
    alignment_for,
    associate,
    eval_ate,
    map_errors,
    summarize_trials,
    write_status_csv,
)
from atlasslam.exceptions import InsufficientOverlapException
from atlasslam.imu import NavState
from atlasslam.manifold import Pose, SimTransform, exp_so3
from atlasslam.models import Keyframe, SlamMap

WARP = SimTransform(0.5, exp_so3(np.array([0.1, -0.2, 0.7])), np.array([3.0, -1.0, 2.0]))


def circle(count=40, radius=2.0):
    poses = []
    for k in range(count):
        angle = 2.0 * np.pi * k / count
        position = np.array([radius * np.cos(angle), radius * np.sin(angle), 0.3 * np.sin(3 * angle)])
        poses.append((0.1 * k, Pose(exp_so3(np.array([0.0, 0.0, angle])), position)))
    return poses


def warped(trajectory, transform=WARP):
    return [(t, transform.transform_pose(pose)) for t, pose in trajectory]


class TestAssociation:
    def test_nearest_within_tolerance(self):
        truth = [(0.0, Pose()), (0.1, Pose()), (0.2, Pose())]
        estimate = [(0.004, Pose()), (0.098, Pose()), (0.15, Pose()), (0.2, Pose())]
        assert associate(estimate, truth) == [(0, 0), (1, 1), (3, 2)]

    def test_truth_used_once(self):
        truth = [(0.0, Pose())]
        assert associate([(0.0, Pose()), (0.001, Pose())], truth) == [(0, 0)]

    def test_empty(self):
        assert associate([], [(0.0, Pose())]) == []


class TestAte:
    def test_identical(self):
        truth = circle()
        report = eval_ate(truth, truth)
        assert report.ate_rmse < 1e-9
        assert report.pairs == 40
        assert report.scale_error < 1e-9

    def test_similarity_warp_monocular(self):
        truth = circle()
        report = eval_ate(warped(truth), truth, SensorMode.MONOCULAR)
        assert report.alignment == "sim3"
        assert report.ate_rmse < 1e-9
        assert np.isclose(report.scale, 2.0)
        assert np.isclose(report.scale_error, 1.0)

    def test_rigid_alignment_keeps_scale_error(self):
        truth = circle()
        report = eval_ate(warped(truth), truth, SensorMode.STEREO)
        assert report.alignment == "se3"
        assert report.ate_rmse > 0.5

    def test_rigid_warp(self):
        truth = circle()
        rigid = SimTransform(1.0, WARP.rotation, WARP.translation)
        report = eval_ate(warped(truth, rigid), truth, SensorMode.STEREO_INERTIAL)
        assert report.ate_rmse < 1e-9

    def test_insufficient_overlap(self):
        truth = circle()
        estimate = [(t + 5.0, pose) for t, pose in truth[:10]] + truth[:2]
        with pytest.raises(InsufficientOverlapException):
            eval_ate(estimate, truth)

    def test_alignment_kind(self):
        assert alignment_for(SensorMode.MONOCULAR) is AlignmentKind.SIM3
        assert alignment_for("mono-inertial") is AlignmentKind.SE3


class TestReports:
    def test_yaml(self, tmp_path):
        report = EvalReport(0.05, "se3", 1.01, 100, [{"kind": "merge"}], [{"stage": "inertial-only"}], {"maps": 2})
        path = tmp_path / "report.yaml"
        report.write_yaml(path)
        loaded = EvalReport.from_yaml(path)
        assert loaded.to_dict() == report.to_dict()
        assert loaded.extra == {"maps": 2}
        assert np.isclose(loaded.scale_error, 0.01)

    def test_status_csv(self, tmp_path):
        path = tmp_path / "status.csv"
        write_status_csv(path, [(1.0, "OK", 0.5, 120, 0), (1.05, "LOST", 0.0, 0, None)])
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["timestamp", "state", "time_in_state", "tracked", "map"]
        assert rows[1] == ["1.000000000", "OK", "0.500000", "120", "0"]
        assert rows[2][-1] == ""

    def test_summary(self):
        trials = [InitTrial(0, 0.01, 0.5), InitTrial(1, 0.03, 1.5), InitTrial(2, failure="no parallax")]
        summary = summarize_trials(trials)
        assert summary["trials"] == 3
        assert summary["succeeded"] == 2
        assert np.isclose(summary["median_scale_error"], 0.02)
        assert summary["runs"][2]["failure"] == "no parallax"
        assert summary["runs"][2]["scale_error"] is None

    def test_empty_summary(self):
        assert summarize_trials([])["median_scale_error"] is None


class TestMapErrors:
    def test_scaled_map(self):
        truth = circle(12)
        slam_map = SlamMap(0)
        for index, (timestamp, pose) in enumerate(truth):
            scaled = Pose(pose.rotation, 2.0 * pose.translation)
            slam_map.insert_keyframe(Keyframe(index, timestamp, NavState(scaled), None))
        scale_error, tilt = map_errors(slam_map, truth)
        assert np.isclose(scale_error, 0.5)
        assert tilt < 1e-6
