import logging

import numpy as np
import pytest

from atlasslam.const import GRAVITY_INERTIAL
from atlasslam.exceptions import EmptyStreamException, InvalidArgumentException, NonMonotoneTimeException
from atlasslam.imu import (
    ImuNoise,
    ImuSample,
    NavState,
    inertial_residual,
    preintegrate,
    samples_between,
)
from atlasslam.manifold import Pose, exp_so3

from .conftest import numeric_jacobian

RATE = 200.0


def stationary(duration: float = 1.0):
    count = int(duration * RATE) + 1
    return [ImuSample(k / RATE, np.zeros(3), [0.0, 0.0, 9.81]) for k in range(count)]


def wavy(rng, duration: float = 0.5):
    count = int(duration * RATE) + 1
    phase = rng.uniform(0.0, np.pi, 6)
    samples = []
    for k in range(count):
        t = k / RATE
        gyro = 0.4 * np.sin(3.0 * t + phase[:3])
        accel = np.array([0.0, 0.0, 9.81]) + 1.5 * np.sin(2.0 * t + phase[3:])
        samples.append(ImuSample(t, gyro, accel))
    return samples


class TestPreintegration:
    def test_stationary(self):
        pre = preintegrate(stationary())
        assert np.isclose(pre.delta_time, 1.0)
        assert np.allclose(pre.delta_rotation, np.eye(3))
        assert np.allclose(pre.delta_velocity, [0.0, 0.0, 9.81])
        assert np.allclose(pre.delta_position, [0.0, 0.0, 0.5 * 9.81])

    def test_constant_rotation_rate(self):
        samples = [ImuSample(k / RATE, [0.0, 0.0, 0.5], np.zeros(3)) for k in range(401)]
        pre = preintegrate(samples)
        assert np.allclose(pre.delta_rotation, exp_so3(np.array([0.0, 0.0, 1.0])))

    def test_bias_is_removed(self):
        bias = np.array([0.01, -0.02, 0.005, 0.1, 0.0, -0.05])
        samples = [
            ImuSample(s.timestamp, s.gyro + bias[:3], s.accel + bias[3:]) for s in stationary()
        ]
        pre = preintegrate(samples, bias)
        assert np.allclose(pre.delta_velocity, [0.0, 0.0, 9.81])

    def test_covariance_grows(self, rng):
        samples = wavy(rng)
        short = preintegrate(samples[:20])
        full = preintegrate(samples)
        assert np.trace(full.covariance) > np.trace(short.covariance) > 0
        assert np.allclose(full.covariance, full.covariance.T)

    def test_bias_jacobians(self, rng):
        samples = wavy(rng)
        pre = preintegrate(samples)
        new_bias = 1e-4 * rng.normal(size=6)
        rotation, velocity, position = pre.corrected_deltas(new_bias)
        exact = pre.reintegrate(new_bias)
        assert np.allclose(rotation, exact.delta_rotation, atol=1e-7)
        assert np.allclose(velocity, exact.delta_velocity, atol=1e-7)
        assert np.allclose(position, exact.delta_position, atol=1e-7)

    def test_merge_matches_single_pass(self, rng):
        samples = wavy(rng)
        split = len(samples) // 3
        merged = preintegrate(samples[: split + 1]).merge(preintegrate(samples[split:]))
        single = preintegrate(samples)
        assert np.isclose(merged.delta_time, single.delta_time)
        assert np.allclose(merged.delta_rotation, single.delta_rotation)
        assert np.allclose(merged.delta_velocity, single.delta_velocity)
        assert np.allclose(merged.delta_position, single.delta_position)
        assert np.allclose(merged.jac_position_gyro, single.jac_position_gyro)
        assert np.allclose(merged.covariance, single.covariance, rtol=1e-6, atol=1e-14)
        assert len(merged.samples) == len(samples)

    def test_merge_requires_same_bias(self, rng):
        samples = wavy(rng)
        with pytest.raises(InvalidArgumentException):
            preintegrate(samples[:10]).merge(preintegrate(samples[9:], np.full(6, 0.01)))

    def test_large_correction_warns(self, rng, caplog):
        pre = preintegrate(wavy(rng))
        with caplog.at_level(logging.WARNING, logger="atlasslam.imu"):
            pre.correct_bias(np.full(6, 0.1))
        assert "re-integrate" in caplog.text

    def test_empty(self):
        with pytest.raises(EmptyStreamException):
            preintegrate([])

    def test_non_monotone(self):
        samples = stationary(0.1)
        samples[3], samples[4] = samples[4], samples[3]
        with pytest.raises(NonMonotoneTimeException):
            preintegrate(samples)


class TestNoise:
    def test_positive(self):
        with pytest.raises(InvalidArgumentException):
            ImuNoise(gyro_noise=0.0)

    def test_gravity_vector(self):
        assert np.allclose(ImuNoise().gravity_vector, GRAVITY_INERTIAL)


class TestSamplesBetween:
    def test_interpolated_ends(self):
        stream = [ImuSample(k * 0.1, [k, 0.0, 0.0], np.zeros(3)) for k in range(11)]
        window = samples_between(stream, 0.25, 0.55)
        assert np.isclose(window[0].timestamp, 0.25)
        assert np.isclose(window[-1].timestamp, 0.55)
        assert np.isclose(window[0].gyro[0], 2.5)
        assert np.isclose(window[-1].gyro[0], 5.5)
        assert [round(s.timestamp, 6) for s in window[1:-1]] == [0.3, 0.4, 0.5]

    def test_exact_timestamps(self):
        stream = [ImuSample(k * 0.1, np.zeros(3), np.zeros(3)) for k in range(11)]
        window = samples_between(stream, 0.2, 0.4)
        assert window[0] is stream[2]
        assert len(window) == 3

    def test_empty_stream(self):
        assert samples_between([], 0.0, 1.0) == []


class TestInertialResidual:
    def consistent_states(self):
        pre = preintegrate(stationary())
        return NavState(Pose()), NavState(Pose()), pre

    def test_zero_for_stationary_body(self):
        state_i, state_j, pre = self.consistent_states()
        residual, _ = inertial_residual(state_i, state_j, pre, GRAVITY_INERTIAL)
        assert np.allclose(residual, 0.0, atol=1e-9)

    def test_jacobians(self, rng):
        pre = preintegrate(wavy(rng))
        state_i = NavState(
            Pose(exp_so3(rng.normal(size=3) * 0.3), rng.normal(size=3)), rng.normal(size=3)
        )
        state_j = NavState(
            Pose(exp_so3(rng.normal(size=3) * 0.3), rng.normal(size=3)), rng.normal(size=3)
        )
        _, jacobians = inertial_residual(state_i, state_j, pre, GRAVITY_INERTIAL)

        def residual_with(**changes):
            a = state_i.copy()
            b = state_j.copy()
            if "pose_i" in changes:
                a.pose = state_i.pose.retract(changes["pose_i"])
            if "velocity_i" in changes:
                a.velocity = state_i.velocity + changes["velocity_i"]
            if "bias" in changes:
                a.bias = state_i.bias + changes["bias"]
            if "pose_j" in changes:
                b.pose = state_j.pose.retract(changes["pose_j"])
            if "velocity_j" in changes:
                b.velocity = state_j.velocity + changes["velocity_j"]
            return inertial_residual(a, b, pre, GRAVITY_INERTIAL)[0]

        for name, size in (
            ("pose_i", 6),
            ("velocity_i", 3),
            ("bias", 6),
            ("pose_j", 6),
            ("velocity_j", 3),
        ):
            numeric = numeric_jacobian(lambda d: residual_with(**{name: d}), np.zeros(size), size)
            assert np.allclose(jacobians[name], numeric, atol=1e-5), name
