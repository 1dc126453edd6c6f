"""Per-tick QP velocity controller for a torso with one or two arms.

Decision vector (dual mode)::

    [qdot (controlled joints) | lam_p_pos | lam_p_ori | lam_s_pos | lam_s_ori]

Single mode drops the secondary slack blocks and the other arm's joints.
Slack enters the task rows as ``J qdot + lam = nu``. The primary position
slack is pinned to zero and only released when the problem is infeasible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from . import obstacles as obs
from .kinematics import FrameSet, KinematicChain, Pose, manipulability, rotation_to_axis_angle
from .model import load_yaml
from .qp import INFEASIBLE, OPTIMAL, ActiveSetSolver, QpProblem, QpSolution, dump_problem
from .trajectory import TargetMode, TrajectorySampler, sample_next_pose

log = logging.getLogger(__name__)

CONFIG_FORMAT_VERSION = 1
SLACK_BLOCKS = ("primary_pos", "primary_ori", "secondary_pos", "secondary_ori")
FROZEN = "frozen"


class ControlError(RuntimeError):
    """Hard failure; ``dump`` holds the state and QP of the offending tick."""

    def __init__(self, message: str, dump: str = ""):
        super().__init__(message)
        self.dump = dump


# -- configuration -------------------------------------------------------------


@dataclass
class ControllerConfig:
    weights: np.ndarray
    home: np.ndarray
    g_low: np.ndarray
    g_high: np.ndarray
    G_low: np.ndarray
    G_high: np.ndarray
    slack_weights: dict[str, np.ndarray] = field(
        default_factory=lambda: {
            "primary_pos": np.full(3, 1e4),
            "primary_ori": np.full(3, 1e3),
            "secondary_pos": np.full(3, 1e4),
            "secondary_ori": np.full(3, 1e3),
        }
    )
    slack_bounds: dict[str, float] = field(
        default_factory=lambda: {"primary_pos": 0.0, "primary_ori": np.inf, "secondary_pos": np.inf, "secondary_ori": np.inf}
    )
    home_weight: float = 0.05
    home_horizon: float = 1.0
    omega0: float = 0.01
    t_s: float = 0.01
    mode: str = "single"
    primary_arm: str = "right"
    secondary_arm: str | None = None
    speed: float = 0.1
    min_duration: float | None = None
    max_linear_speed: float = 0.5
    max_angular_speed: float = 2.0
    qp_tol: float = 1e-8
    qp_max_iter: int = 200
    avoidance: obs.AvoidanceParams = field(default_factory=obs.AvoidanceParams)

    def validate(self, chain: KinematicChain) -> None:
        n = chain.dof
        for name in ("weights", "home", "g_low", "g_high", "G_low", "G_high"):
            v = getattr(self, name)
            if np.shape(v) != (n,):
                raise ControlError(f"config {name} must have {n} entries")
        if np.any(self.weights <= 0):
            raise ControlError("joint weights must be positive")
        for k in SLACK_BLOCKS:
            if np.shape(self.slack_weights[k]) != (3,) or np.any(self.slack_weights[k] <= 0):
                raise ControlError(f"slack weights {k} must be three positive values")
            if self.slack_bounds[k] not in (0.0, np.inf):
                raise ControlError(f"slack bound {k} must be 0 or inf")
        if not (self.omega0 > 0 and self.t_s > 0 and self.speed > 0 and self.home_horizon > 0):
            raise ControlError("omega0, t_s, speed and home horizon must be positive")
        if not (self.max_linear_speed > 0 and self.max_angular_speed > 0):
            raise ControlError("task speed caps must be positive")
        if self.home_weight < 0:
            raise ControlError("home weight must be non-negative")
        if self.mode not in ("single", "dual"):
            raise ControlError(f"unknown mode {self.mode!r}")
        if self.primary_arm not in chain.arms:
            raise ControlError(f"unknown primary arm {self.primary_arm!r}")
        if self.mode == "dual" and self.secondary_arm not in chain.arms:
            raise ControlError("dual mode needs a secondary arm")
        lo, hi = chain.lower, chain.upper
        ok = (lo <= self.g_low) & (self.g_low < self.g_high) & (self.g_high <= self.G_low) & (self.G_low < self.G_high) & (self.G_high <= hi)
        if not np.all(ok):
            bad = [chain.joints[i].name for i in np.flatnonzero(~ok)]
            raise ControlError(f"joint-limit thresholds out of order for {bad}")
        if np.any(self.home < lo) or np.any(self.home > hi):
            raise ControlError("home posture outside joint limits")
        self.avoidance.check_model(chain)

    def arms(self) -> list[str]:
        return [self.primary_arm] if self.mode == "single" else [self.primary_arm, self.secondary_arm]


def default_config(chain: KinematicChain, **overrides) -> ControllerConfig:
    """Defaults for ``chain``: torso joints weigh 3x arm joints, ramps 1 and 10 degrees inside the limits."""
    n = chain.dof
    weights = np.ones(n)
    weights[chain.torso] = 3.0
    lo, hi = chain.lower, chain.upper
    home = np.clip(np.zeros(n), lo, hi)
    cfg = ControllerConfig(
        weights=weights,
        home=home,
        g_low=lo + np.deg2rad(1.0),
        g_high=lo + np.deg2rad(10.0),
        G_low=hi - np.deg2rad(10.0),
        G_high=hi - np.deg2rad(1.0),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    if cfg.min_duration is None:
        cfg.min_duration = 10.0 * cfg.t_s
    if cfg.mode == "dual" and cfg.secondary_arm is None:
        cfg.secondary_arm = next(a for a in chain.arms if a != cfg.primary_arm)
    return cfg


def config_to_dict(cfg: ControllerConfig, chain: KinematicChain) -> dict[str, Any]:
    av = cfg.avoidance
    return {
        "format_version": CONFIG_FORMAT_VERSION,
        "mode": cfg.mode,
        "primary_arm": cfg.primary_arm,
        "secondary_arm": cfg.secondary_arm,
        "control_period": float(cfg.t_s),
        "cartesian_speed": float(cfg.speed),
        "min_duration": None if cfg.min_duration is None else float(cfg.min_duration),
        "manipulability_threshold": float(cfg.omega0),
        "home_weight": float(cfg.home_weight),
        "home_horizon": float(cfg.home_horizon),
        "task_speed_cap": {"linear": float(cfg.max_linear_speed), "angular": float(cfg.max_angular_speed)},
        "qp": {"tolerance": float(cfg.qp_tol), "max_iterations": int(cfg.qp_max_iter)},
        "slack": {
            k: {"weights": [float(w) for w in cfg.slack_weights[k]], "bound": float(cfg.slack_bounds[k])}
            for k in SLACK_BLOCKS
        },
        "avoidance": {
            "k1": av.k1,
            "k2": dict(av.k2),
            "pps_range": av.pps_range,
            "survival_time": av.survival_time,
            "pressure_threshold": av.pressure_threshold,
            "max_pressure": av.max_pressure,
            "cluster_radius": av.cluster_radius,
            "self_collision_threshold": av.self_collision_threshold,
            "gains": dict(av.gains),
        },
        "joints": {
            j.name: {
                "weight": float(cfg.weights[i]),
                "home": round(float(cfg.home[i]), 9),
                "ramp": [round(float(getattr(cfg, k)[i]), 9) for k in ("g_low", "g_high", "G_low", "G_high")],
            }
            for i, j in enumerate(chain.joints)
        },
    }


def config_from_dict(doc: dict[str, Any], chain: KinematicChain) -> ControllerConfig:
    if doc.get("format_version") != CONFIG_FORMAT_VERSION:
        raise ControlError(f"unsupported config format_version {doc.get('format_version')!r}")
    try:
        joints = doc["joints"]
        missing = [j.name for j in chain.joints if j.name not in joints]
        if missing:
            raise ControlError(f"config lacks joints {missing}")
        rows = [joints[j.name] for j in chain.joints]
        ramps = np.array([r["ramp"] for r in rows], dtype=float)
        av = doc["avoidance"]
        cfg = ControllerConfig(
            weights=np.array([r["weight"] for r in rows], dtype=float),
            home=np.array([r["home"] for r in rows], dtype=float),
            g_low=ramps[:, 0],
            g_high=ramps[:, 1],
            G_low=ramps[:, 2],
            G_high=ramps[:, 3],
            slack_weights={k: np.array(doc["slack"][k]["weights"], dtype=float) for k in SLACK_BLOCKS},
            slack_bounds={k: float(doc["slack"][k]["bound"]) for k in SLACK_BLOCKS},
            home_weight=float(doc["home_weight"]),
            home_horizon=float(doc["home_horizon"]),
            omega0=float(doc["manipulability_threshold"]),
            t_s=float(doc["control_period"]),
            mode=doc["mode"],
            primary_arm=doc["primary_arm"],
            secondary_arm=doc.get("secondary_arm"),
            speed=float(doc["cartesian_speed"]),
            min_duration=None if doc.get("min_duration") is None else float(doc["min_duration"]),
            max_linear_speed=float(doc["task_speed_cap"]["linear"]),
            max_angular_speed=float(doc["task_speed_cap"]["angular"]),
            qp_tol=float(doc["qp"]["tolerance"]),
            qp_max_iter=int(doc["qp"]["max_iterations"]),
            avoidance=obs.AvoidanceParams(
                k1=float(av["k1"]),
                k2={k: float(v) for k, v in av["k2"].items()},
                pps_range=float(av["pps_range"]),
                survival_time=float(av["survival_time"]),
                pressure_threshold=float(av["pressure_threshold"]),
                max_pressure=float(av["max_pressure"]),
                cluster_radius=float(av["cluster_radius"]),
                self_collision_threshold=float(av["self_collision_threshold"]),
                gains={k: float(v) for k, v in av["gains"].items()},
            ),
        )
    except KeyError as exc:
        raise ControlError(f"config missing key {exc}") from None
    if cfg.mode == "dual" and cfg.secondary_arm is None:
        cfg.secondary_arm = next(a for a in chain.arms if a != cfg.primary_arm)
    cfg.validate(chain)
    return cfg


def bundled_config_path() -> Path:
    from importlib.resources import files

    return Path(str(files("reactive_control") / "data" / "controller_config.yaml"))


def load_config(chain: KinematicChain, path: str | Path | None = None, **overrides) -> ControllerConfig:
    p = bundled_config_path() if path is None else Path(path)
    with open(p) as fh:
        doc = load_yaml(fh.read())
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(doc, chain)


# -- formulas --------------------------------------------------------------------


def desired_spatial_velocity(current: Pose, nxt: Pose, t_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Linear and angular velocity that moves ``current`` onto ``nxt`` in one period."""
    if not t_s > 0:
        raise ControlError("control period must be positive")
    v = (np.asarray(nxt.position, dtype=float) - np.asarray(current.position, dtype=float)) / t_s
    w = rotation_to_axis_angle(nxt.rotation @ current.rotation.T) / t_s
    return v, w


def saturate(v: np.ndarray, limit: float) -> np.ndarray:
    """``v`` scaled down, direction kept, so its norm does not exceed ``limit``."""
    n = float(np.linalg.norm(v))
    return v if n <= limit else v * (limit / n)


def damping_factor(omega: float, omega0: float) -> float:
    if omega < 0 or not omega0 > 0:
        raise ControlError("manipulability must be non-negative and its threshold positive")
    if omega < omega0:
        return (1.0 - omega / omega0) ** 2 + 0.01
    return 0.01


def limit_factors(q, g_low, g_high, G_low, G_high) -> tuple[np.ndarray, np.ndarray]:
    """Scale factors for the lower and upper velocity bounds.

    Each factor is 1 across the middle of the range and falls linearly to 0
    at the outer threshold of its own side.
    """
    q = np.asarray(q, dtype=float)
    c_min = np.clip((q - g_low) / (g_high - g_low), 0.0, 1.0)
    c_max = np.clip((G_high - q) / (G_high - G_low), 0.0, 1.0)
    return c_min, c_max


def joint_limit_velocity_bounds(q, cfg: ControllerConfig, chain: KinematicChain) -> tuple[np.ndarray, np.ndarray]:
    c_min, c_max = limit_factors(q, cfg.g_low, cfg.g_high, cfg.G_low, cfg.G_high)
    v = chain.velocity_limits
    return -v * c_min, v * c_max


def home_posture_velocity(q, q_home, horizon: float, lower, upper) -> np.ndarray:
    """Velocity that would reach ``q_home`` in ``horizon`` seconds, clamped to the bounds."""
    if not horizon > 0:
        raise ControlError("home horizon must be positive")
    qd = (np.asarray(q_home, dtype=float) - np.asarray(q, dtype=float)) / horizon
    return np.clip(qd, lower, upper)


# -- decision layout and problem assembly -------------------------------------------


@dataclass(frozen=True)
class DecisionLayout:
    joints: tuple[int, ...]
    slack: dict[str, slice]
    width: int

    @property
    def columns(self) -> dict[int, int]:
        return {j: k for k, j in enumerate(self.joints)}

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @classmethod
    def for_mode(cls, chain: KinematicChain, cfg: ControllerConfig) -> "DecisionLayout":
        joints: list[int] = list(chain.torso)
        for arm in cfg.arms():
            joints += chain.arms[arm]
        blocks = SLACK_BLOCKS[:2] if cfg.mode == "single" else SLACK_BLOCKS
        slack, k = {}, len(joints)
        for b in blocks:
            slack[b] = slice(k, k + 3)
            k += 3
        return cls(tuple(joints), slack, k)

    def labels(self) -> list[str]:
        return [f"qdot{j}" for j in self.joints] + [f"{b}{i}" for b in self.slack for i in range(3)]


def arm_damping(frames: FrameSet, chain: KinematicChain, arm: str, omega0: float) -> tuple[float, float]:
    J = frames.jacobian(arm).pos
    omega = manipulability(J)
    return omega, damping_factor(omega, omega0)


@dataclass
class TaskRows:
    """Extra constraint rows over the joint columns of the decision vector."""

    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "TaskRows":
        return cls(np.zeros((0, n)), np.zeros(0), np.zeros((0, n)), np.zeros(0))


def relative_position_rows(frames: FrameSet, cfg: ControllerConfig, layout: DecisionLayout, d_rel) -> tuple[np.ndarray, np.ndarray]:
    """Rows keeping ``x_primary - x_secondary`` at ``d_rel``, posed on velocities."""
    if cfg.mode != "dual":
        raise ControlError("relative-position task needs dual mode")
    p, s = cfg.primary_arm, cfg.secondary_arm
    cols = layout.columns
    Jp = frames.jacobian(p).scatter(layout.width, cols, "pos")
    Js = frames.jacobian(s).scatter(layout.width, cols, "pos")
    xp = frames.transform(p)[:3, 3]
    xs = frames.transform(s)[:3, 3]
    rhs = (np.asarray(d_rel, dtype=float) - (xp - xs)) / cfg.t_s
    return Jp - Js, rhs


def build_problem(
    frames: FrameSet,
    cfg: ControllerConfig,
    layout: DecisionLayout,
    velocities: dict[str, tuple[np.ndarray, np.ndarray]],
    collision: tuple[np.ndarray, np.ndarray] | None = None,
    task: TaskRows | None = None,
    relaxed: bool = False,
) -> tuple[QpProblem, float, dict[str, float], np.ndarray]:
    """Assemble the QP for one tick.

    ``velocities`` maps each controlled arm to its desired (linear, angular)
    velocity. ``collision`` and ``task`` rows must already span the full
    decision width. Returns (problem, mu, manipulability per arm, home velocity).
    """
    chain = frames.chain
    n, nj = layout.width, layout.n_joints
    jidx = list(layout.joints)
    arms = cfg.arms()
    if set(velocities) != set(arms):
        raise ControlError(f"desired velocities given for {sorted(velocities)}, expected {sorted(arms)}")

    omegas, mus = {}, []
    for arm in arms:
        omega, mu = arm_damping(frames, chain, arm, cfg.omega0)
        omegas[arm] = omega
        mus.append(mu)
    mu = max(mus)

    q = frames.q
    qd_lo, qd_hi = joint_limit_velocity_bounds(q, cfg, chain)
    qd_h = home_posture_velocity(q, cfg.home, cfg.home_horizon, qd_lo, qd_hi)

    W = cfg.weights[jidx]
    roles = dict(zip(arms, ("primary", "secondary")))
    slack_w = np.concatenate([cfg.slack_weights[b] for b in layout.slack])
    H = np.diag(np.concatenate([(mu + cfg.home_weight) * W, slack_w]))
    g = np.concatenate([-cfg.home_weight * W * qd_h[jidx], np.zeros(n - nj)])

    cols = layout.columns
    A_eq, b_eq = [], []
    for arm in arms:
        J = frames.jacobian(arm)
        v, w = velocities[arm]
        for block, target in (("pos", v), ("ori", w)):
            rows = J.scatter(n, cols, block)
            rows[:, layout.slack[f"{roles[arm]}_{block}"]] = np.eye(3)
            A_eq.append(rows)
            b_eq.append(np.asarray(target, dtype=float))
    A_in, b_in = [np.zeros((0, n))], [np.zeros(0)]
    if collision is not None:
        A_in.append(collision[0])
        b_in.append(collision[1])
    if task is not None:
        A_eq.append(task.A_eq)
        b_eq.append(task.b_eq)
        A_in.append(task.A_in)
        b_in.append(task.b_in)

    lb = np.empty(n)
    ub = np.empty(n)
    lb[:nj], ub[:nj] = qd_lo[jidx], qd_hi[jidx]
    for b, sl in layout.slack.items():
        eps = np.inf if (relaxed and b == "primary_pos") else cfg.slack_bounds[b]
        lb[sl], ub[sl] = -eps, eps

    p = QpProblem(H, g, np.vstack(A_eq), np.concatenate(b_eq), np.vstack(A_in), np.concatenate(b_in), lb, ub)
    for name, M in (("A_eq", p.A_eq), ("A_in", p.A_in)):
        if M.shape[1] != n:
            raise ControlError(f"{name} has {M.shape[1]} columns, layout needs {n}")
    return p, mu, omegas, qd_h


# -- control loop ----------------------------------------------------------------


@dataclass
class Target:
    pose: Pose
    mode: TargetMode = field(default_factory=TargetMode)


@dataclass
class Diagnostics:
    tick: int
    status: str
    fallback: bool
    frozen: bool
    iterations: int
    mu: float
    omegas: dict[str, float]
    slack: dict[str, np.ndarray]
    row_slack: np.ndarray
    collision_points: list
    min_obstacle_distance: float
    clamped: bool
    desired: dict[str, Pose]
    problem: QpProblem | None = None


@dataclass
class ControlState:
    q: np.ndarray
    collisions: obs.CollisionSet
    samplers: dict[str, TrajectorySampler]
    static_samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    relative_position: np.ndarray | None = None
    tick: int = 0
    warm: tuple = ()

    @classmethod
    def initial(cls, chain: KinematicChain, cfg: ControllerConfig, q0=None, static_samples=None) -> "ControlState":
        q = np.array(cfg.home if q0 is None else q0, dtype=float)
        if q.shape != (chain.dof,):
            raise ControlError(f"initial posture must have {chain.dof} entries")
        samplers = {arm: TrajectorySampler(cfg.t_s, cfg.min_duration) for arm in chain.arms}
        static = np.zeros((0, 3)) if static_samples is None else np.asarray(static_samples, dtype=float).reshape(-1, 3)
        return cls(q, obs.CollisionSet(cfg.avoidance), samplers, static)


@dataclass
class StepResult:
    qdot: np.ndarray
    q: np.ndarray
    diagnostics: Diagnostics


def observe(frames: FrameSet, cfg: ControllerConfig, events: Iterable[obs.SensorEvent], static_samples) -> list[obs.CollisionPoint]:
    """Collision points seen this tick from sensor events and robot geometry."""
    chain = frames.chain
    av = cfg.avoidance
    parts = obs.controlled_parts(chain, cfg.arms())
    visual, prox, tactile = [], [], []
    for e in events:
        if isinstance(e, obs.VisualKeypoint):
            visual.append(e)
        elif isinstance(e, obs.ProximityReading):
            prox.append(e)
        elif isinstance(e, obs.TactileContact):
            tactile.append(e)
        else:
            raise ControlError(f"unknown sensor event {type(e).__name__}")
    pts = obs.project_visual(visual, frames, av, parts)
    pts += obs.project_proximity(prox, frames, av)
    pts += obs.cluster_tactile(tactile, av, frames)
    pts += obs.self_collision_points(frames, av, cfg.mode, cfg.primary_arm, cfg.secondary_arm)
    pts += obs.static_obstacle_points(static_samples, frames, av, parts)
    return pts


def _labels_to_indices(warm: tuple, in_labels: list, n: int) -> list[int]:
    pos = {lab: i for i, lab in enumerate(in_labels)}
    m = len(in_labels)
    out = []
    for lab in warm:
        if lab[0] == "row" and lab[1] in pos:
            out.append(pos[lab[1]])
        elif lab[0] == "ub" and lab[1] < n:
            out.append(m + lab[1])
        elif lab[0] == "lb" and lab[1] < n:
            out.append(m + n + lab[1])
    return out


def _indices_to_labels(active: Sequence[int], in_labels: list, n: int) -> tuple:
    m = len(in_labels)
    out = []
    for i in active:
        if i < m:
            out.append(("row", in_labels[i]))
        elif i < m + n:
            out.append(("ub", i - m))
        else:
            out.append(("lb", i - m - n))
    return tuple(out)


def _tick_dump(state: ControlState, p: QpProblem | None, msg: str) -> str:
    head = f"# tick {state.tick}: {msg}\n# q {np.array2string(state.q, precision=17, max_line_width=10**6)}\n"
    return head + (dump_problem(p) if p is not None else "")


def control_step(
    state: ControlState,
    cfg: ControllerConfig,
    chain: KinematicChain,
    targets: dict[str, Target | None],
    events: Iterable[obs.SensorEvent] = (),
    solver: ActiveSetSolver | None = None,
    frames: FrameSet | None = None,
) -> StepResult:
    """Advance ``state`` by one control period.

    A primary-arm position task that cannot be met is retried with its slack
    released; if that fails too the robot holds still for the tick.
    """
    solver = solver or ActiveSetSolver(cfg.qp_tol, cfg.qp_max_iter)
    if frames is None or not np.array_equal(frames.q, state.q):
        frames = chain.evaluate(state.q)
    layout = DecisionLayout.for_mode(chain, cfg)

    observed = observe(frames, cfg, events, state.static_samples)
    state.collisions.update(observed, cfg.t_s)
    state.collisions.refresh_positions(frames)

    velocities, desired = {}, {}
    for arm in cfg.arms():
        current = frames.pose(arm)
        target = targets.get(arm)
        sampler = state.samplers[arm]
        if target is None:
            sampler.reset()
            nxt = current
        else:
            # a streamed NaN surfaces in the QP check below, together with the problem dump
            finite = np.all(np.isfinite(target.pose.position)) and np.all(np.isfinite(target.pose.orientation))
            if not finite and target.mode.kind != "streamed":
                raise ControlError(f"NaN in {arm} target", _tick_dump(state, None, f"NaN in {arm} target"))
            nxt = sample_next_pose(current, target.pose, target.mode, sampler)
        desired[arm] = nxt
        v, w = desired_spatial_velocity(current, nxt, cfg.t_s)
        velocities[arm] = (saturate(v, cfg.max_linear_speed), saturate(w, cfg.max_angular_speed))

    A_o, b_o, used = obs.constraint_rows(state.collisions, frames, cfg.avoidance, layout.columns, layout.width)
    in_labels = [cp.key for cp in used]
    task = None
    if state.relative_position is not None:
        A_r, b_r = relative_position_rows(frames, cfg, layout, state.relative_position)
        task = TaskRows(A_r, b_r, np.zeros((0, layout.width)), np.zeros(0))

    fallback = frozen = False
    p = None
    try:
        p, mu, omegas, _ = build_problem(frames, cfg, layout, velocities, (A_o, b_o), task)
        for name in ("H", "g", "A_eq", "b_eq", "A_in", "b_in"):
            if np.any(np.isnan(getattr(p, name))):
                raise ControlError(f"NaN in {name}", _tick_dump(state, p, f"NaN in {name}"))
        warm = _labels_to_indices(state.warm, in_labels, layout.width)
        sol: QpSolution = solver.solve(p, warm_start=warm)
        if not sol.optimal:
            fallback = True
            p, mu, omegas, _ = build_problem(frames, cfg, layout, velocities, (A_o, b_o), task, relaxed=True)
            sol = solver.solve(p, warm_start=warm)
    except ControlError:
        raise
    except Exception as exc:
        raise ControlError(f"tick {state.tick}: {exc}", _tick_dump(state, p, str(exc))) from exc

    qdot = np.zeros(chain.dof)
    if sol.optimal:
        x = sol.x
        if not np.all(np.isfinite(x)):
            raise ControlError("non-finite QP solution", _tick_dump(state, p, "non-finite solution"))
        qdot[list(layout.joints)] = x[: layout.n_joints]
        state.warm = _indices_to_labels(sol.active_set, in_labels, layout.width)
        status = sol.status
    else:
        frozen = True
        x = np.zeros(layout.width)
        status = FROZEN if sol.status == INFEASIBLE else sol.status
        log.warning("tick %d: QP %s after relaxation, holding still", state.tick, sol.status)
        state.warm = ()

    q_new = state.q + qdot * cfg.t_s
    lo, hi = chain.lower, chain.upper
    over = np.maximum(lo - q_new, q_new - hi)
    clamped = bool(np.any(over > cfg.qp_tol * cfg.t_s))
    if clamped:
        log.warning("tick %d: joint limits exceeded by %.3g rad, clamping", state.tick, float(over.max()))
    q_new = np.clip(q_new, lo, hi)
    if not np.all(np.isfinite(q_new)):
        raise ControlError("non-finite joint positions", _tick_dump(state, p, "non-finite q"))

    distances = [cp.distance for cp in observed if cp.source != obs.TACTILE and np.isfinite(cp.distance)]
    diag = Diagnostics(
        tick=state.tick,
        status=OPTIMAL if sol.optimal else status,
        fallback=fallback,
        frozen=frozen,
        iterations=sol.iterations,
        mu=mu,
        omegas=omegas,
        slack={b: x[sl].copy() for b, sl in layout.slack.items()},
        row_slack=(b_o - A_o @ x) if len(b_o) else np.zeros(0),
        collision_points=used,
        min_obstacle_distance=min(distances) if distances else np.inf,
        clamped=clamped,
        desired=desired,
        problem=p,
    )
    state.q = q_new
    state.tick += 1
    return StepResult(qdot, q_new, diag)
