"""Local trajectory sampling between the current and the target end-effector pose.

Positions go through a third-order LTI filter whose output is close to a
minimum-jerk profile; orientations are interpolated along the SO(3) geodesic
at constant angular speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import Pose, axis_angle_to_rotation, rotation_to_axis_angle

# feedback coefficients of the quasi minimum-jerk LTI filter
MINJERK_A = -150.766
MINJERK_B = -84.981
MINJERK_C = -15.967


class TrajectoryError(ValueError):
    pass


def execution_time(x_d, x_0, v_t: float, t_min: float = 0.0) -> float:
    """Movement duration ``||x_d - x_0|| / v_t``, never below ``t_min``."""
    if not v_t > 0:
        raise TrajectoryError("Cartesian speed must be positive")
    dist = float(np.linalg.norm(np.asarray(x_d, dtype=float) - np.asarray(x_0, dtype=float)))
    return max(dist / v_t, t_min)


def minjerk_system(T: float) -> tuple[np.ndarray, np.ndarray]:
    """State matrix and input vector of the filter for horizon ``T``."""
    A = np.array(
        [
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [MINJERK_A / T**3, MINJERK_B / T**2, MINJERK_C / T],
        ]
    )
    B = np.array([0.0, 0.0, -MINJERK_A / T**3])
    return A, B


@dataclass
class MinJerkFilter:
    """Per-axis third-order filter; ``state`` rows are axes, columns (x, xdot, xddot)."""

    T: float
    t_s: float
    state: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self) -> None:
        if not (self.T > 0 and self.t_s > 0):
            raise TrajectoryError("horizon and step must be positive")
        if self.t_s > self.T / 10.0 + 1e-12:
            raise TrajectoryError(f"step {self.t_s} too coarse for horizon {self.T}")
        self.state = np.array(self.state, dtype=float, ndmin=2)
        self._A, self._B = minjerk_system(self.T)

    @classmethod
    def at_rest(cls, position, T: float, t_s: float) -> "MinJerkFilter":
        pos = np.atleast_1d(np.asarray(position, dtype=float))
        state = np.zeros((len(pos), 3))
        state[:, 0] = pos
        return cls(T, t_s, state)

    @property
    def position(self) -> np.ndarray:
        return self.state[:, 0].copy()

    @property
    def velocity(self) -> np.ndarray:
        return self.state[:, 1].copy()

    def _deriv(self, s: np.ndarray, u: np.ndarray) -> np.ndarray:
        return s @ self._A.T + np.outer(u, self._B)

    def step(self, x_d) -> np.ndarray:
        """Advance one period with the input held constant (RK4); returns positions."""
        u = np.broadcast_to(np.asarray(x_d, dtype=float), (self.state.shape[0],))
        if not np.all(np.isfinite(u)):
            raise TrajectoryError("non-finite filter input")
        h = self.t_s
        s = self.state
        k1 = self._deriv(s, u)
        k2 = self._deriv(s + 0.5 * h * k1, u)
        k3 = self._deriv(s + 0.5 * h * k2, u)
        k4 = self._deriv(s + h * k3, u)
        self.state = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return self.position

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self._A)


def minjerk_step(f: MinJerkFilter, x_d) -> np.ndarray:
    """One integration step of ``f`` toward ``x_d``; returns the new state."""
    f.step(x_d)
    return f.state


def slerp(R1: np.ndarray, R2: np.ndarray, alpha: float, *, with_flag: bool = False):
    """Geodesic interpolation ``expm(alpha logm(R2 R1^T)) R1``.

    When the relative rotation is a half turn the geodesic is not unique; the
    branch chosen by :func:`rotation_to_axis_angle` is used and, with
    ``with_flag``, reported as the second return value.
    """
    if not -1e-12 <= alpha <= 1.0 + 1e-12:
        raise TrajectoryError("interpolation coefficient must lie in [0, 1]")
    r = rotation_to_axis_angle(R2 @ R1.T)
    R = axis_angle_to_rotation(alpha * r) @ R1
    if with_flag:
        return R, bool(np.pi - np.linalg.norm(r) < 1e-9)
    return R


@dataclass
class OrientationSampler:
    R1: np.ndarray
    R2: np.ndarray
    alpha_step: float

    def __post_init__(self) -> None:
        if not 0 < self.alpha_step <= 1:
            raise TrajectoryError("alpha step must lie in (0, 1]")
        self._rel = rotation_to_axis_angle(self.R2 @ self.R1.T)
        self.ambiguous = bool(np.pi - np.linalg.norm(self._rel) < 1e-9)

    def at(self, ticks: int) -> np.ndarray:
        """Orientation after ``ticks`` periods; alpha accumulates and clamps at 1."""
        alpha = min(ticks * self.alpha_step, 1.0)
        if alpha >= 1.0:
            return self.R2.copy()
        return axis_angle_to_rotation(alpha * self._rel) @ self.R1


@dataclass(frozen=True)
class TargetMode:
    """``discrete`` reaches are shaped locally; ``streamed`` targets pass through."""

    kind: str = "discrete"
    speed: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in ("discrete", "streamed"):
            raise TrajectoryError(f"unknown target mode {self.kind!r}")
        if not self.speed > 0:
            raise TrajectoryError("Cartesian speed must be positive")


class TrajectorySampler:
    """Per end-effector sampler state for the active reach."""

    def __init__(self, t_s: float, t_min: float | None = None):
        self.t_s = t_s
        self.t_min = 10.0 * t_s if t_min is None else t_min
        self.filter: MinJerkFilter | None = None
        self.orientation: OrientationSampler | None = None
        self.target: Pose | None = None
        self.ticks = 0

    @property
    def active(self) -> bool:
        return self.filter is not None

    def start(self, current: Pose, target: Pose, speed: float) -> None:
        T = execution_time(target.position, current.position, speed, self.t_min)
        self.filter = MinJerkFilter.at_rest(current.position, T, self.t_s)
        self.orientation = OrientationSampler(current.rotation, target.rotation, self.t_s / T)
        self.target = target
        self.ticks = 0

    def reset(self) -> None:
        self.filter = None
        self.orientation = None
        self.target = None
        self.ticks = 0

    def next(self) -> Pose:
        if self.filter is None or self.orientation is None or self.target is None:
            raise TrajectoryError("no active reach")
        self.ticks += 1
        pos = self.filter.step(self.target.position)
        R = self.orientation.at(self.ticks)
        return Pose(pos, rotation_to_axis_angle(R))


def _same_pose(a: Pose, b: Pose) -> bool:
    return bool(np.array_equal(a.position, b.position) and np.array_equal(a.orientation, b.orientation))


def sample_next_pose(current: Pose, target: Pose, mode: TargetMode, sampler: TrajectorySampler) -> Pose:
    """Desired pose for the next tick.

    Streamed targets are returned unchanged. For discrete reaches a new
    target restarts the sampler from ``current``.
    """
    if mode.kind == "streamed":
        sampler.reset()
        return target
    if sampler.target is None or not _same_pose(sampler.target, target):
        sampler.start(current, target, mode.speed)
    return sampler.next()
