from types import SimpleNamespace

import numpy as np
import pytest

from atlasslam.config import Association, InitConfig
from atlasslam.evaluation import align_trajectories, map_errors
from atlasslam.exceptions import InsufficientParallaxException, PreconditionException, SingularSystemException
from atlasslam.initializer import (
    InertialInitializer,
    InitStage,
    build_tracks,
    decompose_essential,
    epipolar_errors,
    essential_from_rays,
    inertial_only_map,
    joint_vi_init,
    rotation_only_residuals,
    scale_gravity_refine,
    stereo_inertial_init,
    vision_only_init,
)
from atlasslam.manifold import exp_so3, log_so3
from atlasslam.models import Atlas, Keypoint
from atlasslam.sim import TrajectoryKind, WorldSpec, build_reference_map, generate
from atlasslam.solver import OptimizeResult


def view(descriptors, landmarks, camera=0):
    return SimpleNamespace(
        keypoints=[Keypoint((0.0, 0.0), d, camera, landmark=l) for d, l in zip(descriptors, landmarks)]
    )


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestTracks:
    def test_oracle(self, rng):
        d = rng.integers(0, 256, (4, 32))
        views = [view(d, [1, 2, 3, None]), view(d[:2], [2, 7]), view(d[:1], [1], camera=1)]
        assert build_tracks(views, Association.ORACLE) == {2: {0: 1, 1: 0}}

    def test_descriptor_chains(self, rng):
        d = rng.integers(0, 256, (5, 32))
        views = [view(d, [None] * 5), view(d[[4, 3, 2]], [None] * 3), view(d[[3]], [None])]
        tracks = sorted(build_tracks(views).values(), key=len, reverse=True)
        assert tracks[0] == {0: 3, 1: 1, 2: 0}
        assert sorted(map(len, tracks)) == [2, 2, 3]


class TestTwoViewGeometry:
    def scene(self, rng):
        points = np.column_stack((rng.uniform(-2, 2, 40), rng.uniform(-1, 1, 40), rng.uniform(4, 8, 40)))
        rotation = exp_so3(np.array([0.02, -0.1, 0.03]))
        translation = np.array([0.5, 0.05, -0.1])
        return unit(points), unit(points @ rotation.T + translation), rotation, translation

    def test_pure_rotation(self, rng):
        rays, _, rotation, _ = self.scene(rng)
        assert np.all(rotation_only_residuals(rays, rays @ rotation.T) < 1e-9)

    def test_translation_leaves_residuals(self, rng):
        rays_a, rays_b, _, _ = self.scene(rng)
        assert np.max(rotation_only_residuals(rays_a, rays_b)) > 1e-3

    def test_essential(self, rng):
        rays_a, rays_b, rotation, translation = self.scene(rng)
        essential = essential_from_rays(rays_a, rays_b)
        assert np.all(epipolar_errors(essential, rays_a, rays_b) < 1e-9)
        direction = translation / np.linalg.norm(translation)
        assert any(
            np.allclose(r, rotation, atol=1e-6) and np.allclose(t, direction, atol=1e-6)
            for r, t in decompose_essential(essential)
        )
        for r, t in decompose_essential(essential):
            assert np.isclose(np.linalg.det(r), 1.0)
            assert np.isclose(np.linalg.norm(t), 1.0)


@pytest.fixture(scope="module")
def excited():
    return generate(WorldSpec(trajectory=TrajectoryKind.LISSAJOUS, duration=InitConfig().window_seconds + 0.5))


@pytest.fixture(scope="module")
def stereo_world():
    return generate(WorldSpec(duration=2.0, stereo=True))


def init_views(world, config=None):
    config = config or InitConfig()
    session = world.session
    step = int(round(world.spec.frame_rate / config.keyframe_rate_hz))
    views = [f for f in session.frames[::step] if f.timestamp <= config.window_seconds + 1e-9]
    preintegrations = [None] + [session.preintegrate(a.timestamp, b.timestamp) for a, b in zip(views[:-1], views[1:])]
    return views, preintegrations


def vision_map(world):
    views, preintegrations = init_views(world)
    atlas = Atlas()
    atlas.new_active_map(inertial=True)
    tracks = build_tracks(views, Association.ORACLE)
    result = vision_only_init(atlas, views, tracks, world.session.rig, preintegrations=preintegrations)
    return atlas, result


def sim3_rmse(slam_map, truth):
    estimate = [(kf.timestamp, kf.pose) for kf in slam_map.ordered_keyframes()]
    transform, source, target = align_trajectories(estimate, truth, True)
    return float(np.sqrt(np.mean(np.sum((transform.act(source) - target) ** 2, axis=1))))


class TestVisionOnlyInit:
    def test_builds_map(self, excited):
        atlas, result = vision_map(excited)
        slam_map = atlas.active
        assert result.map_id == slam_map.id
        assert result.keyframe_ids == [kf.id for kf in slam_map.ordered_keyframes()]
        assert len(result.keyframe_ids) >= 5
        assert result.parallax_deg >= InitConfig().min_parallax_deg
        assert result.reprojection_rms < 0.05
        assert sim3_rmse(slam_map, excited.session.truth()) < 0.01
        assert not slam_map.imu_initialized
        slam_map.validate()

    def test_needs_empty_map(self, excited):
        atlas, _ = vision_map(excited)
        views, _ = init_views(excited)
        with pytest.raises(PreconditionException):
            vision_only_init(atlas, views, build_tracks(views, Association.ORACLE), excited.session.rig)

    def test_rejects_pure_rotation(self, excited):
        views, _ = init_views(excited)
        still = [views[0], SimpleNamespace(timestamp=views[0].timestamp + 0.5, keypoints=views[0].keypoints)]
        atlas = Atlas()
        atlas.new_active_map()
        with pytest.raises(InsufficientParallaxException):
            vision_only_init(atlas, still, build_tracks(still, Association.ORACLE), excited.session.rig)


class TestInertialOnlyInit:
    def test_recovers_scale_and_gravity(self, excited):
        atlas, _ = vision_map(excited)
        slam_map = atlas.active
        state = inertial_only_map(slam_map)
        assert slam_map.imu_initialized
        assert state.scale > 0 and state.scale_std < InitConfig().max_scale_std
        scale_error, tilt = map_errors(slam_map, excited.session.truth())
        assert scale_error < 0.05
        assert tilt < 2.0
        assert np.allclose(slam_map.ordered_keyframes()[-1].state.bias, state.bias)

    def test_estimate_only(self, excited):
        atlas, _ = vision_map(excited)
        slam_map = atlas.active
        before = {kf.id: kf.pose.translation.copy() for kf in slam_map.keyframes.values()}
        inertial_only_map(slam_map, apply=False)
        assert not slam_map.imu_initialized
        assert all(np.array_equal(kf.pose.translation, before[kf.id]) for kf in slam_map.keyframes.values())

    def test_needs_preintegrations(self, stereo_world):
        slam_map = build_reference_map(stereo_world, Atlas(), stride=10)
        with pytest.raises(PreconditionException):
            inertial_only_map(slam_map)


class TestJointInit:
    def test_refines_initialized_map(self, excited):
        atlas, _ = vision_map(excited)
        slam_map = atlas.active
        inertial_only_map(slam_map)
        result = joint_vi_init(slam_map)
        assert result.chi2 <= result.initial_chi2 + 1e-9
        scale_error, tilt = map_errors(slam_map, excited.session.truth())
        assert scale_error < 0.05
        assert tilt < 2.0

    def test_needs_inertial_estimate(self, excited):
        atlas, _ = vision_map(excited)
        with pytest.raises(PreconditionException):
            joint_vi_init(atlas.active)


class TestScaleGravityRefine:
    def test_initialized_map_is_kept(self, excited):
        atlas, _ = vision_map(excited)
        slam_map = atlas.active
        inertial_only_map(slam_map)
        scale, r_wg = scale_gravity_refine(slam_map)
        assert abs(scale - 1.0) < 0.05
        assert np.degrees(np.linalg.norm(log_so3(r_wg))) < 2.0

    def test_fixed_scale(self, stereo_world):
        slam_map = build_reference_map(stereo_world, Atlas(), stride=10, inertial=True)
        scale, r_wg = scale_gravity_refine(slam_map, fixed_scale=True)
        assert scale == 1.0
        assert np.degrees(np.linalg.norm(log_so3(r_wg))) < 0.5


class TestStereoInertialInit:
    def test_metric_map(self, stereo_world):
        slam_map = build_reference_map(stereo_world, Atlas(), stride=10, inertial=True)
        velocities = {kf.id: kf.state.velocity.copy() for kf in slam_map.keyframes.values()}
        state = stereo_inertial_init(slam_map, apply=False)
        assert state.scale == 1.0
        assert state.scale_std is None
        assert np.degrees(np.linalg.norm(log_so3(state.gravity_rotation))) < 0.5
        for keyframe_id, velocity in state.velocities.items():
            assert np.allclose(velocity, velocities[keyframe_id], atol=0.05)

    def test_rejects_mono_map(self, excited):
        atlas, _ = vision_map(excited)
        with pytest.raises(PreconditionException):
            stereo_inertial_init(atlas.active)


class TestInertialInitializer:
    @pytest.fixture
    def scheduled(self, stereo_world):
        slam_map = build_reference_map(stereo_world, Atlas(), stride=10, inertial=True)
        slam_map.imu_init_time = 0.0
        slam_map.last_scale_refine_time = 20.0
        slam_map.vi_ba_stage = len(InitConfig().vi_ba_times) - 1
        return slam_map

    def run_step(self, monkeypatch, slam_map, outcome):
        def scheduled_ba(*args, **kwargs):
            if isinstance(outcome, Exception):
                raise outcome
            return outcome

        monkeypatch.setattr("atlasslam.initializer.global_bundle_adjustment", scheduled_ba)
        return InertialInitializer(stereo=True).step(slam_map, 20.0)

    def test_mature_after_last_stage(self, monkeypatch, scheduled):
        done = self.run_step(monkeypatch, scheduled, OptimizeResult(2.0, 1.0, 3, True))
        assert done == [InitStage.VI_BA]
        assert scheduled.mature
        scheduled.validate()

    def test_not_converged_is_retried(self, monkeypatch, scheduled):
        done = self.run_step(monkeypatch, scheduled, OptimizeResult(2.0, 1.5, 10, False))
        assert done == [InitStage.VI_BA]
        assert not scheduled.mature
        assert scheduled.vi_ba_stage == len(InitConfig().vi_ba_times) - 1

    def test_failure_is_retried(self, monkeypatch, scheduled):
        done = self.run_step(monkeypatch, scheduled, SingularSystemException("Singular."))
        assert done == []
        assert not scheduled.mature
        assert scheduled.vi_ba_stage == len(InitConfig().vi_ba_times) - 1

    def test_listeners_see_events(self, monkeypatch, scheduled):
        seen = []
        initializer = InertialInitializer(stereo=True)
        initializer.listeners.append(lambda event, slam_map: seen.append(event.stage))
        monkeypatch.setattr(
            "atlasslam.initializer.global_bundle_adjustment", lambda *a, **k: OptimizeResult(2.0, 1.0, 3, True)
        )
        initializer.step(scheduled, 20.0)
        assert seen == [InitStage.VI_BA]
        assert initializer.history[-1].stage is InitStage.VI_BA
