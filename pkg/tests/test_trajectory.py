import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import integrate_ltv_minjerk, lti_step_response_expm, minjerk_polynomial
from reactive_control.kinematics import Pose, axis_angle_to_rotation, geodesic_angle
from reactive_control.sim import is_unimodal
from reactive_control.trajectory import (
    MinJerkFilter,
    OrientationSampler,
    TargetMode,
    TrajectoryError,
    TrajectorySampler,
    execution_time,
    minjerk_step,
    sample_next_pose,
    slerp,
)

LEDGER = "unattainable with the published filter coefficients; see the decisions ledger"


def step_response(T=1.0, t_s=1e-3, duration=None):
    f = MinJerkFilter.at_rest([0.0], T, t_s)
    n = int(round((duration or T) / t_s))
    xs, vs = [0.0], [0.0]
    for _ in range(n):
        minjerk_step(f, 1.0)
        xs.append(f.position[0])
        vs.append(f.velocity[0])
    return np.arange(n + 1) * t_s, np.array(xs), np.array(vs)


def rotation(seed):
    return Rotation.random(random_state=seed).as_matrix()


class TestExecutionTime:
    def test_distance_over_speed(self):
        assert execution_time([0.2, 0, 0], [0, 0, 0], 0.1) == pytest.approx(2.0, abs=1e-15)

    def test_zero_distance_uses_floor(self):
        assert execution_time([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], 0.1, t_min=0.1) == 0.1

    def test_doubling_speed_halves_time(self):
        a = execution_time([0.3, 0.1, 0], [0, 0, 0], 0.1, t_min=0.1)
        b = execution_time([0.3, 0.1, 0], [0, 0, 0], 0.2, t_min=0.1)
        assert b == pytest.approx(a / 2, rel=1e-15)

    def test_speed_must_be_positive(self):
        with pytest.raises(TrajectoryError):
            execution_time([1, 0, 0], [0, 0, 0], 0.0)


class TestMinJerkFilter:
    def test_equilibrium_is_unchanged(self):
        f = MinJerkFilter.at_rest([0.7, -0.2, 0.1], 1.0, 0.01)
        before = f.state.copy()
        minjerk_step(f, [0.7, -0.2, 0.1])
        assert np.array_equal(f.state, before)

    def test_non_finite_input(self):
        f = MinJerkFilter.at_rest([0.0], 1.0, 0.01)
        with pytest.raises(TrajectoryError, match="non-finite"):
            minjerk_step(f, np.nan)

    def test_step_too_coarse(self):
        with pytest.raises(TrajectoryError):
            MinJerkFilter(0.05, 0.01)

    def test_rk4_matches_exact_lti_response(self):
        t, x, v = step_response(T=1.0, t_s=1e-3)
        exact = lti_step_response_expm(1.0, t[::100])
        assert np.max(np.abs(x[::100] - exact[:, 0])) < 1e-10
        assert np.max(np.abs(v[::100] - exact[:, 1])) < 1e-9

    @pytest.mark.xfail(strict=True, reason=LEDGER)
    def test_reaches_ltv_endpoint_within_two_percent(self):
        _, x_ltv = integrate_ltv_minjerk(1.0)
        _, x, _ = step_response(T=1.0, t_s=1e-3)
        assert abs(x_ltv[-1] - 1.0) < 0.01
        assert abs(x[-1] - 1.0) < 0.02

    @pytest.mark.xfail(strict=True, reason=LEDGER)
    def test_speed_at_horizon_below_five_percent_of_peak(self):
        _, _, v = step_response(T=1.0, t_s=1e-3)
        assert abs(v[-1]) < 0.05 * np.max(np.abs(v))

    @pytest.mark.xfail(strict=True, reason=LEDGER)
    def test_deviation_from_polynomial_below_five_percent(self):
        t, x, _ = step_response(T=1.0, t_s=1e-3)
        assert np.max(np.abs(x - minjerk_polynomial(t, 1.0))) < 0.05

    def test_ltv_oracle_tracks_polynomial(self):
        # sanity check on the oracle itself: the exact system reproduces the polynomial
        t, x = integrate_ltv_minjerk(1.0)
        assert np.max(np.abs(x - minjerk_polynomial(t, 1.0))) < 1e-6

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.1, 20.0))
    def test_companion_matrix_is_stable(self, T):
        f = MinJerkFilter(T, min(0.01, T / 10))
        assert np.all(f.eigenvalues().real < 0)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.2, 3.0), st.floats(-1.0, 1.0).filter(lambda d: abs(d) > 1e-3))
    def test_bell_shaped_speed(self, T, travel):
        f = MinJerkFilter.at_rest([0.0], T, 0.01)
        speeds = [0.0]
        for _ in range(int(round(2 * T / 0.01))):
            minjerk_step(f, travel)
            speeds.append(abs(f.velocity[0]))
        speeds = np.array(speeds)
        assert np.all(np.isfinite(speeds))
        assert is_unimodal(speeds)
        assert speeds[0] < 0.05 * speeds.max()
        assert speeds[-1] < 0.05 * speeds.max()


class TestSlerp:
    def test_endpoints(self):
        R1, R2 = rotation(1), rotation(2)
        assert np.array_equal(slerp(R1, R2, 0.0), R1)
        assert np.allclose(slerp(R1, R2, 1.0), R2, atol=1e-10)

    def test_half_of_quarter_turn(self):
        R = slerp(np.eye(3), axis_angle_to_rotation([0, 0, np.pi / 2]), 0.5)
        assert np.allclose(R, axis_angle_to_rotation([0, 0, np.pi / 4]), atol=1e-12)

    def test_half_turn_is_flagged(self):
        R, flag = slerp(np.eye(3), axis_angle_to_rotation([np.pi, 0, 0]), 0.5, with_flag=True)
        assert flag
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-10)
        _, flag = slerp(np.eye(3), axis_angle_to_rotation([3.0, 0, 0]), 0.5, with_flag=True)
        assert not flag

    def test_alpha_out_of_range(self):
        with pytest.raises(TrajectoryError):
            slerp(np.eye(3), np.eye(3), 1.5)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10**6), st.integers(0, 10**6), st.floats(0.0, 1.0))
    def test_angle_is_linear_in_alpha(self, s1, s2, alpha):
        R1, R2 = rotation(s1), rotation(s2)
        full = geodesic_angle(R1, R2)
        if np.pi - full < 1e-6:
            return
        R = slerp(R1, R2, alpha)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-10)
        assert abs(geodesic_angle(R1, R) - alpha * full) < 1e-9


class TestSampleNextPose:
    def test_streamed_returns_target(self):
        target = Pose(np.array([0.1, 0.2, 0.3]), np.array([0.1, 0.0, 0.4]))
        current = Pose(np.zeros(3), np.zeros(3))
        out = sample_next_pose(current, target, TargetMode("streamed"), TrajectorySampler(0.01))
        assert out is target

    def test_target_at_current_stays_put(self):
        p = Pose(np.array([0.1, 0.2, 0.3]), np.array([0.1, 0.0, 0.4]))
        sampler = TrajectorySampler(0.01)
        out = sample_next_pose(p, p, TargetMode("discrete", 0.1), sampler)
        assert np.array_equal(out.position, p.position)
        assert np.allclose(out.orientation, p.orientation, atol=1e-15)

    def test_constant_angular_step_over_full_reach(self):
        start = Pose(np.array([-0.2, 0.1, 0.05]), np.array([0.3, -1.2, 0.4]))
        goal = Pose(np.array([-0.25, 0.2, 0.1]), np.array([-0.5, 0.9, 2.0]))
        sampler = TrajectorySampler(0.01)
        mode = TargetMode("discrete", 0.1)
        poses = [start]
        current = start
        while True:
            current = sample_next_pose(current, goal, mode, sampler)
            poses.append(current)
            if sampler.ticks * sampler.orientation.alpha_step >= 1.0:
                break
        steps = np.array([geodesic_angle(a.rotation, b.rotation) for a, b in zip(poses[:-2], poses[1:-1])])
        assert len(steps) > 100
        assert np.max(steps) - np.min(steps) < 1e-9
        assert np.allclose(poses[-1].rotation, goal.rotation, atol=1e-12)

    def test_orientation_sampler_clamps(self):
        s = OrientationSampler(np.eye(3), rotation(4), 0.3)
        assert np.array_equal(s.at(4), s.R2)
        assert np.array_equal(s.at(0), np.eye(3))

    def test_unknown_mode(self):
        with pytest.raises(TrajectoryError):
            TargetMode("teleport")
