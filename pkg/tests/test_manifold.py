import numpy as np
import pytest

from atlasslam.exceptions import AtlasException, DegenerateConfigurationException, InvalidArgumentException
from atlasslam.manifold import (
    Pose,
    SimTransform,
    exp_so3,
    gravity_jacobian,
    log_so3,
    normalize_rotation,
    quaternion_from_rotation,
    retract_gravity,
    right_jacobian_inv_so3,
    right_jacobian_so3,
    rotation_between,
    rotation_from_quaternion,
    umeyama_alignment,
)

from .conftest import numeric_jacobian


def random_pose(rng) -> Pose:
    return Pose(exp_so3(rng.uniform(-1.0, 1.0, 3)), rng.normal(0.0, 2.0, 3))


class TestSO3:
    def test_exp_log_roundtrip(self, rng):
        for _ in range(50):
            omega = rng.normal(size=3)
            omega *= rng.uniform(0.0, 3.0) / np.linalg.norm(omega)
            assert np.allclose(log_so3(exp_so3(omega)), omega, atol=1e-9)

    def test_exp_is_rotation(self, rng):
        r = exp_so3(rng.normal(size=3))
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(r), 1.0)

    def test_small_angle(self):
        omega = np.array([1e-10, -2e-10, 3e-10])
        assert np.allclose(log_so3(exp_so3(omega)), omega, atol=1e-15)

    def test_log_at_pi(self):
        omega = log_so3(exp_so3(np.array([0.0, 0.0, np.pi])))
        assert np.isclose(np.linalg.norm(omega), np.pi)
        assert np.allclose(exp_so3(omega), exp_so3(np.array([0.0, 0.0, np.pi])), atol=1e-9)

    def test_right_jacobian(self, rng):
        for _ in range(20):
            omega = rng.uniform(-1.0, 1.0, 3)
            numeric = numeric_jacobian(
                lambda d: log_so3(exp_so3(omega).T @ exp_so3(omega + d)), np.zeros(3), 3
            )
            assert np.allclose(right_jacobian_so3(omega), numeric, atol=1e-6)

    def test_right_jacobian_inverse(self, rng):
        omega = rng.uniform(-1.0, 1.0, 3)
        assert np.allclose(right_jacobian_so3(omega) @ right_jacobian_inv_so3(omega), np.eye(3), atol=1e-10)

    def test_normalize_rotation(self, rng):
        r = exp_so3(rng.normal(size=3)) + 1e-4 * rng.normal(size=(3, 3))
        n = normalize_rotation(r)
        assert np.allclose(n.T @ n, np.eye(3), atol=1e-12)
        assert np.linalg.norm(n - r) < 1e-3

    def test_rotation_between(self):
        a, b = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 1.0]) / np.sqrt(2.0)
        assert np.allclose(rotation_between(a, b) @ a, b)
        assert np.allclose(rotation_between(a, -a) @ a, -a)

    def test_quaternion_roundtrip(self, rng):
        r = exp_so3(rng.normal(size=3))
        q = quaternion_from_rotation(r)
        assert np.isclose(np.linalg.norm(q), 1.0)
        assert np.allclose(rotation_from_quaternion(q), r, atol=1e-12)


class TestPose:
    def test_inverse(self, rng):
        pose = random_pose(rng)
        identity = pose.compose(pose.inverse())
        assert np.allclose(identity.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(identity.translation, 0.0, atol=1e-12)

    def test_matrix(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        assert np.allclose(a.compose(b).matrix(), a.matrix() @ b.matrix())
        assert np.allclose(Pose.from_matrix(a.matrix()).translation, a.translation)

    def test_act_many(self, rng):
        pose = random_pose(rng)
        points = rng.normal(size=(5, 3))
        assert np.allclose(pose.act(points), np.array([pose.act(p) for p in points]))

    def test_retract_is_right_perturbation(self, rng):
        pose = random_pose(rng)
        delta = np.array([0.1, -0.2, 0.05, 0.3, 0.0, -0.1])
        expected = pose.compose(Pose(exp_so3(delta[:3]), delta[3:]))
        moved = pose.retract(delta)
        assert np.allclose(moved.rotation, expected.rotation)
        assert np.allclose(moved.translation, expected.translation)


class TestSimTransform:
    def test_inverse(self, rng):
        s = SimTransform(1.7, exp_so3(rng.normal(size=3)), rng.normal(size=3))
        x = rng.normal(size=3)
        assert np.allclose(s.inverse().act(s.act(x)), x)

    def test_compose(self, rng):
        a = SimTransform(0.5, exp_so3(rng.normal(size=3)), rng.normal(size=3))
        b = SimTransform(2.5, exp_so3(rng.normal(size=3)), rng.normal(size=3))
        x = rng.normal(size=3)
        assert np.allclose(a.compose(b).act(x), a.act(b.act(x)))

    def test_positive_scale(self):
        with pytest.raises(InvalidArgumentException) as e:
            SimTransform(0.0)
        assert isinstance(e.value, AtlasException)
        assert e.value.title == "InvalidArgument"

    def test_transform_pose_moves_camera(self, rng):
        s = SimTransform(1.5, exp_so3(rng.normal(size=3)), rng.normal(size=3))
        body = random_pose(rng)
        camera_from_body = random_pose(rng)
        moved = s.transform_pose(body, camera_from_body)
        camera = body.compose(camera_from_body.inverse())
        moved_camera = moved.compose(camera_from_body.inverse())
        assert np.allclose(moved_camera.translation, s.act(camera.translation))
        assert np.allclose(moved_camera.rotation, s.rotation @ camera.rotation)

    def test_transform_pose_without_extrinsics(self, rng):
        s = SimTransform(0.8, exp_so3(rng.normal(size=3)), rng.normal(size=3))
        body = random_pose(rng)
        moved = s.transform_pose(body)
        assert np.allclose(moved.translation, s.act(body.translation))
        assert np.allclose(moved.rotation, s.rotation @ body.rotation)


class TestGravity:
    def test_retract_keeps_rotation(self, rng):
        r_wg = exp_so3(rng.normal(size=3))
        updated = retract_gravity(r_wg, 0.1, -0.2)
        assert np.allclose(updated.T @ updated, np.eye(3))
        assert np.allclose(retract_gravity(r_wg, 0.0, 0.0), r_wg)

    def test_jacobian_matches_finite_differences(self, rng):
        r_wg = exp_so3(rng.normal(size=3))
        gravity = np.array([0.0, 0.0, -9.81])
        numeric = numeric_jacobian(lambda d: retract_gravity(r_wg, d[0], d[1]) @ gravity, np.zeros(2), 2)
        assert np.allclose(gravity_jacobian(r_wg, gravity), numeric, atol=1e-5)

    def test_third_axis_leaves_gravity(self, rng):
        r_wg = exp_so3(rng.normal(size=3))
        gravity = np.array([0.0, 0.0, -9.81])
        spun = r_wg @ exp_so3(np.array([0.0, 0.0, 0.4]))
        assert np.allclose(spun @ gravity, r_wg @ gravity)


class TestUmeyama:
    def test_recovers_similarity(self, rng):
        warp = SimTransform(1.3, exp_so3(np.array([0.2, -0.4, 0.9])), np.array([1.0, -2.0, 0.5]))
        source = rng.normal(size=(30, 3))
        transform, _ = umeyama_alignment(source, warp.act(source))
        assert np.isclose(transform.scale, 1.3)
        assert np.allclose(transform.rotation, warp.rotation, atol=1e-9)
        assert np.allclose(transform.translation, warp.translation, atol=1e-9)

    def test_rigid(self, rng):
        warp = SimTransform(1.0, exp_so3(np.array([0.0, 0.3, 0.0])), np.array([0.0, 1.0, 0.0]))
        source = rng.normal(size=(10, 3))
        transform, _ = umeyama_alignment(source, warp.act(source), with_scale=False)
        assert transform.scale == 1.0
        assert np.allclose(transform.act(source), warp.act(source), atol=1e-9)

    def test_coincident_points(self):
        source = np.ones((5, 3))
        with pytest.raises(DegenerateConfigurationException):
            umeyama_alignment(source, source)

    def test_collinear_points(self):
        source = np.outer(np.arange(6.0), np.array([1.0, 2.0, 0.5]))
        with pytest.raises(DegenerateConfigurationException):
            umeyama_alignment(source, source + 1.0)

    def test_too_few_points(self, rng):
        source = rng.normal(size=(2, 3))
        with pytest.raises(DegenerateConfigurationException):
            umeyama_alignment(source, source)

    def test_collapsed_target(self, rng):
        source = rng.normal(size=(8, 3))
        with pytest.raises(DegenerateConfigurationException):
            umeyama_alignment(source, np.zeros((8, 3)))
