"""Scripted scenarios, deterministic closed-loop replay and metrics.

A scenario names a robot model and controller config, gives each arm a
target script and lists obstacles. :func:`run_scenario` steps the controller
at its period and records one metrics row per tick; :func:`summarize`
reduces those rows (or a metrics CSV) to a summary record.

Row ``k`` describes the robot at time ``k * t_s``: the posture before the
command of tick ``k`` is applied, the obstacles seen at that tick, and the
command computed from them.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import obstacles as obs
from .controller import ControlState, ControllerConfig, Target, control_step, load_config
from .kinematics import KinematicChain, Pose, geodesic_angle
from .model import dump_yaml, load_model, load_yaml
from .qp import ActiveSetSolver, OPTIMAL, dump_problem
from .trajectory import TargetMode

SCENARIO_FORMAT_VERSION = 1
POSITION_TOLERANCE = 0.005
ORIENTATION_TOLERANCE = 0.1
TARGET_TIMEOUT = 10.0

# grid of Cartesian reach targets and the two hand orientations (axis, angle)
GRID_X = (-0.23, -0.19, -0.15)
GRID_Y = (0.11, 0.15, 0.19)
GRID_Z = (0.08, 0.12, 0.16)
ORIENTATION_1 = (-0.15, -0.79, 0.59, 3.06)
ORIENTATION_2 = (-0.11, 0.99, 0.02, 3.14)
POSE_1 = ((-0.23, 0.26, 0.02), (-0.15, -0.79, 0.59, 3.06))
POSE_2 = ((-0.26, 0.03, 0.03), (-0.11, 0.99, 0.01, 3.14))
# shift applied to the grid so it lies inside the bundled model's workspace
GRID_OFFSET = (0.0, 0.0, 0.0)


class ScenarioError(ValueError):
    pass


def _vec(v, n: int = 3, what: str = "vector") -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise ScenarioError(f"{what} must be {n} finite numbers, got {v!r}")
    return a


def orientation_from_doc(v) -> np.ndarray:
    """Rotation vector from ``[rx, ry, rz]`` or ``[ax, ay, az, angle]``."""
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape == (3,) and np.all(np.isfinite(a)):
        if np.linalg.norm(a) > np.pi + 1e-12:
            raise ScenarioError(f"rotation vector angle exceeds pi: {v!r}")
        return a
    return Pose.from_axis_angle4(np.zeros(3), _vec(a, 4, "axis_angle")).orientation


def pose_from_doc(doc) -> Pose:
    """``{position, rotation_vector}`` or ``{position, axis_angle: [ax, ay, az, angle]}`` to a pose."""
    try:
        rot = doc["rotation_vector"] if "rotation_vector" in doc else doc["axis_angle"]
        return Pose(_vec(doc["position"], 3, "position"), orientation_from_doc(rot))
    except (KeyError, TypeError):
        raise ScenarioError(f"bad pose {doc!r}") from None


def pose_to_doc(p: Pose) -> dict:
    """Exact form: the rotation vector survives the round trip bit for bit."""
    return {"position": [float(v) for v in p.position], "rotation_vector": [float(v) for v in p.orientation]}


# -- target scripts --------------------------------------------------------------


@dataclass
class SequenceScript:
    """Point-to-point targets visited in order.

    A target is left once it has been reached and held for ``hold`` seconds,
    or after ``timeout`` seconds. The last target stays commanded.
    """

    targets: list[Pose]
    timeout: float = TARGET_TIMEOUT
    hold: float = 0.0
    mode: str = "discrete"

    kind = "sequence"

    def __post_init__(self) -> None:
        if not self.targets:
            raise ScenarioError("sequence needs at least one target")
        if not (self.timeout > 0 and self.hold >= 0):
            raise ScenarioError("timeout must be positive and hold non-negative")

    def to_doc(self) -> dict:
        return {"kind": self.kind, "mode": self.mode, "timeout": self.timeout, "hold": self.hold, "targets": [pose_to_doc(p) for p in self.targets]}


@dataclass
class CircleScript:
    """Streamed circular reference, preceded by a point-to-point approach to its start."""

    center: np.ndarray
    radius: float
    period: float
    orientation: Pose
    plane: str = "yz"
    direction: float = 1.0
    phase: float = 0.0
    approach: float = 3.0

    kind = "circle"

    def __post_init__(self) -> None:
        self.center = _vec(self.center, 3, "center")
        if not self.radius > 0:
            raise ScenarioError("circle radius must be positive")
        if not self.period > 0 or self.approach < 0:
            raise ScenarioError("circle period must be positive and approach non-negative")
        _plane_axes(self.plane)

    def point(self, t: float) -> np.ndarray:
        return circle_point(self.center, self.radius, self.period, t, self.plane, self.direction, self.phase)

    def to_doc(self) -> dict:
        return {
            "kind": self.kind,
            "center": [float(v) for v in self.center],
            "radius": self.radius,
            "period": self.period,
            "plane": self.plane,
            "direction": self.direction,
            "phase": self.phase,
            "approach": self.approach,
            "orientation": pose_to_doc(self.orientation)["rotation_vector"],
        }


@dataclass
class TimedScript:
    """Targets switched at fixed times; each entry holds until the next."""

    entries: list[tuple[float, Pose, str]]

    kind = "timed"

    def __post_init__(self) -> None:
        times = [e[0] for e in self.entries]
        if not self.entries or any(b < a for a, b in zip(times, times[1:])):
            raise ScenarioError("timed targets need non-decreasing timestamps")

    def to_doc(self) -> dict:
        return {"kind": self.kind, "entries": [{"time": t, "mode": m, **pose_to_doc(p)} for t, p, m in self.entries]}


Script = SequenceScript | CircleScript | TimedScript


def _plane_axes(plane: str) -> tuple[np.ndarray, np.ndarray]:
    axes = {"x": 0, "y": 1, "z": 2}
    if len(plane) != 2 or plane[0] not in axes or plane[1] not in axes or plane[0] == plane[1]:
        raise ScenarioError(f"bad plane {plane!r}")
    I = np.eye(3)
    return I[axes[plane[0]]], I[axes[plane[1]]]


def circle_point(center, radius: float, period: float, t: float, plane: str = "yz", direction: float = 1.0, phase: float = 0.0) -> np.ndarray:
    u, v = _plane_axes(plane)
    th = phase + direction * 2.0 * math.pi * t / period
    return np.asarray(center, dtype=float) + radius * (math.cos(th) * u + math.sin(th) * v)


def circle_reference(
    radius: float,
    period: float,
    center,
    plane: str = "yz",
    t_s: float = 0.01,
    *,
    direction: float = 1.0,
    phase: float = 0.0,
    dual_center=None,
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Positions of one full period of the circle, one per tick plus the closing point.

    With ``dual_center`` a second, counter-rotating circle starting half a
    turn out of phase is returned as well; the two are mirror images.
    """
    if not radius > 0:
        raise ScenarioError("circle radius must be positive")
    n = int(round(period / t_s))
    ts = np.arange(n + 1) * t_s
    first = np.array([circle_point(center, radius, period, t, plane, direction, phase) for t in ts])
    if dual_center is None:
        return first
    second = np.array([circle_point(dual_center, radius, period, t, plane, -direction, math.pi - phase) for t in ts])
    return first, second


def script_from_doc(doc: dict) -> Script:
    kind = doc.get("kind")
    if kind == "sequence":
        return SequenceScript(
            [pose_from_doc(p) for p in doc["targets"]],
            float(doc.get("timeout", TARGET_TIMEOUT)),
            float(doc.get("hold", 0.0)),
            doc.get("mode", "discrete"),
        )
    if kind == "circle":
        return CircleScript(
            doc["center"],
            float(doc["radius"]),
            float(doc["period"]),
            Pose(np.zeros(3), orientation_from_doc(doc["orientation"])),
            doc.get("plane", "yz"),
            float(doc.get("direction", 1.0)),
            float(doc.get("phase", 0.0)),
            float(doc.get("approach", 3.0)),
        )
    if kind == "timed":
        return TimedScript([(float(e["time"]), pose_from_doc(e), e.get("mode", "discrete")) for e in doc["entries"]])
    raise ScenarioError(f"unknown target script kind {kind!r}")


# -- obstacles -------------------------------------------------------------------


@dataclass
class MovingObstacle:
    """Point obstacle at ``start + t * velocity``, perceived exactly while active."""

    start: np.ndarray
    velocity: np.ndarray
    start_time: float = 0.0
    end_time: float = math.inf

    def __post_init__(self) -> None:
        self.start = _vec(self.start, 3, "obstacle start")
        self.velocity = _vec(self.velocity, 3, "obstacle velocity")

    def position(self, tick: int, t_s: float) -> np.ndarray:
        return self.start + tick * t_s * self.velocity

    def active(self, t: float) -> bool:
        return self.start_time <= t <= self.end_time

    def to_doc(self) -> dict:
        return {
            "start": [float(v) for v in self.start],
            "velocity": [float(v) for v in self.velocity],
            "start_time": self.start_time,
            "end_time": None if math.isinf(self.end_time) else self.end_time,
        }


def event_from_doc(doc: dict) -> tuple[float, obs.SensorEvent]:
    t = float(doc["time"])
    kind = doc.get("type")
    if kind == "visual":
        return t, obs.VisualKeypoint(_vec(doc["position"]), doc.get("kind", "body"))
    if kind == "proximity":
        return t, obs.ProximityReading(str(doc["sensor"]), float(doc["distance"]))
    if kind == "tactile":
        normal = _vec(doc["normal"])
        if abs(np.linalg.norm(normal) - 1.0) > 1e-6:
            raise ScenarioError("tactile normal must be unit length")
        if float(doc["pressure"]) < 0:
            raise ScenarioError("tactile pressure must be non-negative")
        return t, obs.TactileContact(int(doc["taxel"]), int(doc["link"]), _vec(doc["position"]), normal, float(doc["pressure"]))
    raise ScenarioError(f"unknown sensor event type {kind!r}")


def event_to_doc(t: float, e: obs.SensorEvent) -> dict:
    if isinstance(e, obs.VisualKeypoint):
        return {"time": t, "type": "visual", "position": [float(v) for v in e.position], "kind": e.kind}
    if isinstance(e, obs.ProximityReading):
        return {"time": t, "type": "proximity", "sensor": e.sensor, "distance": float(e.distance)}
    return {
        "time": t,
        "type": "tactile",
        "taxel": e.taxel,
        "link": e.link,
        "position": [float(v) for v in e.position],
        "normal": [float(v) for v in e.normal],
        "pressure": float(e.pressure),
    }


def plane_samples(center, size, spacing: float = 0.02, plane: str = "xy") -> np.ndarray:
    """Grid of points on a rectangle, used to describe table tops and walls."""
    u, v = _plane_axes(plane)
    a = np.arange(-size[0] / 2, size[0] / 2 + spacing / 2, spacing)
    b = np.arange(-size[1] / 2, size[1] / 2 + spacing / 2, spacing)
    A, B = np.meshgrid(a, b, indexing="ij")
    return np.asarray(center, dtype=float) + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v


def static_from_doc(items: list) -> np.ndarray:
    pts = [np.zeros((0, 3))]
    for it in items or []:
        if it.get("kind") == "plane":
            pts.append(plane_samples(_vec(it["center"]), _vec(it["size"], 2, "size"), float(it.get("spacing", 0.02)), it.get("plane", "xy")))
        elif it.get("kind") == "points":
            pts.append(np.asarray(it["points"], dtype=float).reshape(-1, 3))
        else:
            raise ScenarioError(f"unknown static obstacle kind {it.get('kind')!r}")
    return np.vstack(pts)


# -- scenario --------------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    duration: float
    targets: dict[str, Script]
    model: str | None = None
    config: str | None = None
    mode: str | None = None
    primary_arm: str | None = None
    seed: int = 0
    initial_posture: dict[str, float] | None = None
    obstacles: list[MovingObstacle] = field(default_factory=list)
    events: list[tuple[float, obs.SensorEvent]] = field(default_factory=list)
    static: list[dict] = field(default_factory=list)
    relative_position: np.ndarray | None = None
    stop_when_done: bool = True
    base_dir: Path | None = None
    notes: str = ""

    def __post_init__(self) -> None:
        if not self.duration > 0:
            raise ScenarioError("duration must be positive")
        times = [t for t, _ in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ScenarioError("event timestamps must be non-decreasing")

    def resolve(self, ref: str | None) -> Path | None:
        if ref is None:
            return None
        p = Path(ref)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        if not p.exists():
            raise ScenarioError(f"referenced file {ref!r} not found")
        return p

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {
            "format_version": SCENARIO_FORMAT_VERSION,
            "name": self.name,
            "notes": self.notes,
            "model": self.model,
            "config": self.config,
            "mode": self.mode,
            "primary_arm": self.primary_arm,
            "duration": self.duration,
            "stop_when_done": self.stop_when_done,
            "seed": self.seed,
            "initial_posture": self.initial_posture,
            "relative_position": None if self.relative_position is None else [float(v) for v in self.relative_position],
            "targets": {arm: s.to_doc() for arm, s in self.targets.items()},
            "obstacles": [o.to_doc() for o in self.obstacles],
            "events": [event_to_doc(t, e) for t, e in self.events],
            "static": self.static,
        }
        return doc


def scenario_from_doc(doc: dict, base_dir: Path | None = None) -> Scenario:
    if doc.get("format_version") != SCENARIO_FORMAT_VERSION:
        raise ScenarioError(f"unsupported scenario format_version {doc.get('format_version')!r}")
    try:
        obstacles = []
        for o in doc.get("obstacles") or []:
            end = o.get("end_time")
            obstacles.append(MovingObstacle(o["start"], o["velocity"], float(o.get("start_time", 0.0)), math.inf if end is None else float(end)))
        rel = doc.get("relative_position")
        return Scenario(
            name=str(doc["name"]),
            duration=float(doc["duration"]),
            targets={arm: script_from_doc(s) for arm, s in (doc.get("targets") or {}).items()},
            model=doc.get("model"),
            config=doc.get("config"),
            mode=doc.get("mode"),
            primary_arm=doc.get("primary_arm"),
            seed=int(doc.get("seed", 0)),
            initial_posture=doc.get("initial_posture"),
            obstacles=obstacles,
            events=[event_from_doc(e) for e in doc.get("events") or []],
            static=list(doc.get("static") or []),
            relative_position=None if rel is None else _vec(rel),
            stop_when_done=bool(doc.get("stop_when_done", True)),
            base_dir=base_dir,
            notes=str(doc.get("notes", "")),
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario missing key {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    with open(p) as fh:
        doc = load_yaml(fh.read())
    return scenario_from_doc(doc, p.parent)


def save_scenario(s: Scenario, path: str | Path | None = None) -> str:
    return dump_yaml(s.to_doc(), path)


# -- runtime ---------------------------------------------------------------------


class _ScriptRun:
    """Per-arm progress through a target script."""

    def __init__(self, script: Script, t_s: float, speed: float):
        self.script = script
        self.t_s = t_s
        self.speed = speed
        self.index = 0
        self.started = 0
        self.reached_at: int | None = None
        self.done = False

    def target(self, k: int) -> tuple[Target, int, bool]:
        """(target, target id, streamed) for tick ``k``."""
        s = self.script
        t = k * self.t_s
        if isinstance(s, SequenceScript):
            return Target(s.targets[self.index], TargetMode(s.mode, self.speed)), self.index, s.mode == "streamed"
        if isinstance(s, CircleScript):
            if t < s.approach:
                start = Pose(s.point(0.0), s.orientation.orientation)
                return Target(start, TargetMode("discrete", self.speed)), -1, False
            return Target(Pose(s.point(t - s.approach), s.orientation.orientation), TargetMode("streamed", self.speed)), 0, True
        i = max(j for j, e in enumerate(s.entries) if e[0] <= t) if s.entries[0][0] <= t else 0
        _, pose, mode = s.entries[i]
        return Target(pose, TargetMode(mode, self.speed)), i, mode == "streamed"

    def update(self, k: int, reached: bool) -> bool:
        """Record the reach state seen at tick ``k``; returns whether the target in force counts as reached.

        The script moves on to its next target afterwards when due.
        """
        s = self.script
        if not isinstance(s, SequenceScript):
            return False
        if reached and self.reached_at is None:
            self.reached_at = k
        flag = self.reached_at is not None
        if self.done:
            return flag
        held = flag and (k - self.reached_at) * self.t_s >= s.hold - 1e-12
        expired = not flag and (k - self.started) * self.t_s >= s.timeout - 1e-12
        if held or expired:
            if self.index + 1 < len(s.targets):
                self.index += 1
                self.started = k
                self.reached_at = None
            else:
                self.done = True
        return flag

    def finished(self, k: int) -> bool:
        """Whether the script has nothing left to do after tick ``k``."""
        s = self.script
        if isinstance(s, SequenceScript):
            return self.done
        if isinstance(s, CircleScript):
            return k * self.t_s >= s.approach + s.period - 1e-9
        return False


@dataclass
class RunResult:
    rows: list[dict]
    summary: dict
    columns: list[str]
    qp_dumps: list[str] = field(default_factory=list)

    def csv_text(self) -> str:
        return rows_to_csv(self.rows, self.columns)


def metric_columns(chain: KinematicChain, n_obstacles: int) -> list[str]:
    cols = [
        "tick", "time", "status", "fallback", "frozen", "clamped", "iterations", "mu",
        "n_collision_rows", "min_row_slack", "min_obstacle_distance", "min_interarm_distance",
    ]
    for arm in chain.arms:
        cols += [f"{arm}_{c}" for c in ("x", "y", "z", "rx", "ry", "rz", "target", "streamed", "target_pos_err",
                                          "target_ori_err", "reached", "track_pos_err", "track_ori_err", "speed",
                                          "slack_pos", "slack_ori")]
    cols += [f"q_{j.name}" for j in chain.joints]
    cols += [f"qd_{j.name}" for j in chain.joints]
    for i in range(n_obstacles):
        cols += [f"obstacle{i}_x", f"obstacle{i}_y", f"obstacle{i}_z", f"obstacle{i}_active"]
    return cols


def _arm_parts(chain: KinematicChain, arm: str):
    return [p for p in chain.body_parts.values() if p.arm == arm]


def _min_distance(frames, parts, points: np.ndarray) -> float:
    if len(points) == 0:
        return math.inf
    best = math.inf
    for part in parts:
        cloud = obs.part_cloud(frames, part)
        if len(cloud.world):
            best = min(best, float(obs.pairwise_distances(cloud.world, points).min()))
    return best


def run_scenario(
    s: Scenario,
    *,
    model: str | Path | None = None,
    config: str | Path | None = None,
    ticks: int | None = None,
    dump_qp: bool = False,
) -> RunResult:
    """Replay ``s`` in closed loop; every reference is resolved before the first tick."""
    chain = load_model(model if model is not None else s.resolve(s.model))
    overrides = {"mode": s.mode, "primary_arm": s.primary_arm}
    cfg = load_config(chain, config if config is not None else s.resolve(s.config), **overrides)
    if cfg.mode == "dual" and cfg.secondary_arm not in chain.arms:
        cfg.secondary_arm = next(a for a in chain.arms if a != cfg.primary_arm)
    cfg.validate(chain)
    for arm in s.targets:
        if arm not in cfg.arms():
            raise ScenarioError(f"targets given for arm {arm!r}, which is not controlled in {cfg.mode} mode")

    q0 = cfg.home.copy()
    for name, val in (s.initial_posture or {}).items():
        q0[chain.link_index(name)] = float(val)
    state = ControlState.initial(chain, cfg, q0, static_from_doc(s.static))
    state.relative_position = s.relative_position
    solver = ActiveSetSolver(cfg.qp_tol, cfg.qp_max_iter)
    runs = {arm: _ScriptRun(script, cfg.t_s, cfg.speed) for arm, script in s.targets.items()}
    events_by_tick: dict[int, list] = {}
    for t, e in s.events:
        events_by_tick.setdefault(int(round(t / cfg.t_s)), []).append(e)

    n_ticks = int(round(s.duration / cfg.t_s)) if ticks is None else int(ticks)
    columns = metric_columns(chain, len(s.obstacles))
    all_parts = list(chain.body_parts.values())
    arm_names = list(chain.arms)
    rows: list[dict] = []
    dumps: list[str] = []
    prev_pose = {arm: None for arm in arm_names}
    prev_desired: dict[str, Pose] = {}

    for k in range(n_ticks):
        t = k * cfg.t_s
        frames = chain.evaluate(state.q)
        obstacle_pts = [o.position(k, cfg.t_s) for o in s.obstacles]
        active = [o.active(t) for o in s.obstacles]
        events = [obs.VisualKeypoint(p) for p, a in zip(obstacle_pts, active) if a]
        events += events_by_tick.get(k, [])
        seen = [p for p, a in zip(obstacle_pts, active) if a]
        seen += [e.position for e in events_by_tick.get(k, []) if isinstance(e, obs.VisualKeypoint)]
        geometry = np.vstack([np.reshape(seen, (-1, 3)), state.static_samples])

        row: dict[str, Any] = {"tick": k, "time": t}
        targets: dict[str, Target | None] = {}
        for arm in arm_names:
            pose = frames.pose(arm)
            row[f"{arm}_x"], row[f"{arm}_y"], row[f"{arm}_z"] = pose.position
            row[f"{arm}_rx"], row[f"{arm}_ry"], row[f"{arm}_rz"] = pose.orientation
            prev = prev_pose[arm]
            row[f"{arm}_speed"] = 0.0 if prev is None else float(np.linalg.norm(pose.position - prev)) / cfg.t_s
            prev_pose[arm] = pose.position
            d = prev_desired.get(arm)
            row[f"{arm}_track_pos_err"] = math.nan if d is None else float(np.linalg.norm(pose.position - d.position))
            row[f"{arm}_track_ori_err"] = math.nan if d is None else geodesic_angle(pose.rotation, d.rotation)
            run = runs.get(arm)
            if run is None:
                targets[arm] = None
                row.update({f"{arm}_target": -1, f"{arm}_streamed": 0, f"{arm}_target_pos_err": math.nan,
                            f"{arm}_target_ori_err": math.nan, f"{arm}_reached": 0})
                continue
            # judge the reach state of the target in force, then let the script advance
            tgt, tid, _ = run.target(k)
            ep = float(np.linalg.norm(pose.position - tgt.pose.position))
            eo = geodesic_angle(pose.rotation, tgt.pose.rotation)
            flag = run.update(k, ep < POSITION_TOLERANCE and eo < ORIENTATION_TOLERANCE)
            row.update({f"{arm}_target": tid, f"{arm}_streamed": int(tgt.mode.kind == "streamed"),
                        f"{arm}_target_pos_err": ep, f"{arm}_target_ori_err": eo, f"{arm}_reached": int(flag)})
            targets[arm], _, _ = run.target(k)

        row["min_obstacle_distance"] = _min_distance(frames, all_parts, geometry)
        if cfg.mode == "dual":
            sec = np.vstack([obs.part_cloud(frames, p).world for p in _arm_parts(chain, cfg.secondary_arm)])
            row["min_interarm_distance"] = _min_distance(frames, _arm_parts(chain, cfg.primary_arm), sec)
        else:
            row["min_interarm_distance"] = math.nan

        q_before = state.q.copy()
        res = control_step(state, cfg, chain, targets, events, solver, frames)
        diag = res.diagnostics
        if dump_qp and diag.problem is not None:
            dumps.append(f"# tick {k} status {diag.status}\n" + dump_problem(diag.problem))
        prev_desired = dict(diag.desired)
        roles = dict(zip(cfg.arms(), ("primary", "secondary")))
        for arm in arm_names:
            role = roles.get(arm)
            row[f"{arm}_slack_pos"] = float(np.linalg.norm(diag.slack[f"{role}_pos"])) if role else 0.0
            row[f"{arm}_slack_ori"] = float(np.linalg.norm(diag.slack[f"{role}_ori"])) if role else 0.0
        row.update({
            "status": diag.status, "fallback": int(diag.fallback), "frozen": int(diag.frozen),
            "clamped": int(diag.clamped), "iterations": diag.iterations, "mu": diag.mu,
            "n_collision_rows": len(diag.row_slack),
            "min_row_slack": float(diag.row_slack.min()) if len(diag.row_slack) else math.inf,
        })
        for j, name in enumerate(chain.joints):
            row[f"q_{name.name}"] = q_before[j]
            row[f"qd_{name.name}"] = res.qdot[j]
        for i, (p, a) in enumerate(zip(obstacle_pts, active)):
            row[f"obstacle{i}_x"], row[f"obstacle{i}_y"], row[f"obstacle{i}_z"] = p
            row[f"obstacle{i}_active"] = int(a)
        rows.append(row)
        if s.stop_when_done and runs and ticks is None and all(r.finished(k) for r in runs.values()):
            break

    return RunResult(rows, summarize(rows, chain_arms=arm_names), columns, dumps)


# -- metrics ---------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_metrics(path_or_text: str | Path) -> list[dict]:
    text = Path(path_or_text).read_text() if not str(path_or_text).lstrip().startswith("tick,") else str(path_or_text)
    return [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(io.StringIO(text))]


def is_unimodal(speeds: Sequence[float], rel_tol: float = 1e-3, abs_tol: float = 1e-6) -> bool:
    """True when ``speeds`` rise to a single peak and then fall.

    Wiggles smaller than ``max(abs_tol, rel_tol * peak)`` are ignored.
    """
    v = np.asarray(speeds, dtype=float)
    if len(v) < 3:
        return True
    tol = max(abs_tol, rel_tol * float(v.max()))
    k = int(np.argmax(v))
    rising, falling = np.diff(v[: k + 1]), np.diff(v[k:])
    return bool(np.all(rising >= -tol) and np.all(falling <= tol))


def _segments(rows: list[dict], arm: str) -> list[tuple[int, int, int]]:
    """(target id, first row, last row) runs of point-to-point targets."""
    segs = []
    start = None
    for i, r in enumerate(rows):
        tid = r[f"{arm}_target"]
        if start is None or tid != rows[start][f"{arm}_target"]:
            if start is not None:
                segs.append((rows[start][f"{arm}_target"], start, i - 1))
            start = i
    if start is not None:
        segs.append((rows[start][f"{arm}_target"], start, len(rows) - 1))
    return [s for s in segs if s[0] >= 0 and not rows[s[1]][f"{arm}_streamed"]]


def summarize(rows: list[dict], chain_arms: Sequence[str] | None = None) -> dict:
    """Aggregate a metrics stream into a summary record."""
    if not rows:
        raise ScenarioError("cannot summarize an empty metrics stream")
    if chain_arms is None:
        chain_arms = [c[: -len("_target")] for c in rows[0] if c.endswith("_target")]
    n = len(rows)
    solved = sum(1 for r in rows if r["status"] == OPTIMAL)
    out: dict[str, Any] = {
        "ticks": n,
        "duration": float(rows[-1]["time"]) - float(rows[0]["time"]) + (float(rows[1]["time"]) - float(rows[0]["time"]) if n > 1 else 0.0),
        "solver_success_fraction": solved / n,
        "fallback_ticks": sum(int(r["fallback"]) for r in rows),
        "frozen_ticks": sum(int(r["frozen"]) for r in rows),
        "clamped_ticks": sum(int(r["clamped"]) for r in rows),
        "min_obstacle_distance": float(min(float(r["min_obstacle_distance"]) for r in rows)),
        "min_interarm_distance": float(np.nanmin([float(r["min_interarm_distance"]) for r in rows])) if any(
            not math.isnan(float(r["min_interarm_distance"])) for r in rows) else None,
        "arms": {},
    }
    total = reached = 0
    for arm in chain_arms:
        segs = _segments(rows, arm)
        targets = []
        for tid, a, b in segs:
            ok = any(int(rows[i][f"{arm}_reached"]) for i in range(a, b + 1))
            first = next((i for i in range(a, b + 1) if int(rows[i][f"{arm}_reached"])), None)
            speeds = [float(rows[i][f"{arm}_speed"]) for i in range(a, b + 1)]
            peak = max(speeds) if speeds else 0.0
            targets.append({
                "target": int(tid),
                "first_tick": int(rows[a]["tick"]),
                "last_tick": int(rows[b]["tick"]),
                "reached": bool(ok),
                "reached_tick": None if first is None else int(rows[first]["tick"]),
                "peak_speed": peak,
                "start_speed_ratio": speeds[0] / peak if peak > 0 else 0.0,
                "end_speed_ratio": speeds[-1] / peak if peak > 0 else 0.0,
                "unimodal": is_unimodal(speeds),
            })
        streamed = [r for r in rows if int(r[f"{arm}_streamed"])]
        tp = np.array([float(r[f"{arm}_track_pos_err"]) for r in streamed])
        to = np.array([float(r[f"{arm}_track_ori_err"]) for r in streamed])
        tp, to = tp[~np.isnan(tp)], to[~np.isnan(to)]
        speeds = [float(r[f"{arm}_speed"]) for r in rows]
        n_t, n_r = len(targets), sum(t["reached"] for t in targets)
        total += n_t
        reached += n_r
        out["arms"][arm] = {
            "targets": n_t,
            "reached": n_r,
            "reach_rate": n_r / n_t if n_t else None,
            "tracking_pos_median": float(np.median(tp)) if len(tp) else None,
            "tracking_pos_mean": float(np.mean(tp)) if len(tp) else None,
            "tracking_ori_median": float(np.median(to)) if len(to) else None,
            "tracking_ori_mean": float(np.mean(to)) if len(to) else None,
            "peak_speed": max(speeds),
            "all_unimodal": all(t["unimodal"] for t in targets),
            "segments": targets,
        }
        if out["min_interarm_distance"] is not None and len(tp):
            out["arms"][arm]["proximity_tracking"] = proximity_tracking(rows, arm)
    out["targets"] = total
    out["reached"] = reached
    out["reach_rate"] = reached / total if total else None
    return out


PROXIMITY_DISTANCE = 0.06


def proximity_tracking(rows: list[dict], arm: str, threshold: float = PROXIMITY_DISTANCE) -> dict:
    """Median streamed tracking error of ``arm`` inside and outside proximity episodes.

    A tick belongs to an episode when the inter-arm distance is below
    ``threshold``, the range where self-collision rows carry a nonzero threat.
    """
    inside, outside = [], []
    for r in rows:
        e = float(r[f"{arm}_track_pos_err"])
        d = float(r["min_interarm_distance"])
        if not int(r[f"{arm}_streamed"]) or math.isnan(e) or math.isnan(d):
            continue
        (inside if d < threshold else outside).append(e)
    med_in = float(np.median(inside)) if inside else None
    med_out = float(np.median(outside)) if outside else None
    ratio = med_in / med_out if inside and outside and med_out > 0 else None
    return {"episode_ticks": len(inside), "median_in_episode": med_in, "median_outside": med_out, "ratio": ratio}


def summary_text(summary: dict) -> str:
    return yaml.safe_dump(summary, sort_keys=False)


# -- bundled scenarios -------------------------------------------------------------


def reachability_grid(seed: int = 1, offset=GRID_OFFSET, timeout: float = TARGET_TIMEOUT) -> Scenario:
    """27 grid targets in shuffled order, each with a randomly chosen orientation.

    Shuffling uses ``numpy.random.Generator(PCG64(seed))``: one
    ``permutation(27)`` over the x-major grid, then ``integers(0, 2, 27)``
    picking orientation 1 or 2 for each visited target.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    grid = [np.array([x, y, z]) + np.asarray(offset, dtype=float) for x in GRID_X for y in GRID_Y for z in GRID_Z]
    order = rng.permutation(len(grid))
    pick = rng.integers(0, 2, len(grid))
    targets = [Pose.from_axis_angle4(grid[i], ORIENTATION_1 if c == 0 else ORIENTATION_2) for i, c in zip(order, pick)]
    return Scenario(
        name="exp-1",
        duration=len(targets) * timeout,
        targets={"right": SequenceScript(targets, timeout=timeout)},
        mode="single",
        primary_arm="right",
        seed=seed,
        notes=f"3x3x3 reach grid shifted by {list(map(float, offset))} m",
    )


def mirror_axis_angle(axis_angle) -> tuple[float, float, float, float]:
    """Orientation reflected through the sagittal (x-z) plane."""
    ax, ay, az, angle = axis_angle
    return (-ax, ay, -az, angle)


def _pose(position, axis_angle) -> Pose:
    return Pose.from_axis_angle4(position, axis_angle)


CIRCLE_PERIOD = 10.0
EXP5_VELOCITIES = {"5-1": (0.0, -0.05, 0.0), "5-2": (0.05, 0.0, 0.0), "5-3": (0.0, 0.0, -0.05)}
# obstacle start points and switch-off times; each path crosses the reach workspace
EXP5_PATHS = {
    "5-1": ((-0.45, 0.6, 0.03), 16.0),
    "5-2": ((-0.75, 0.145, 0.2), 10.0),
    "5-3": ((-0.55, 0.145, 0.5), 10.0),
}


def exp_scenario(name: str) -> Scenario:
    """Bundled analogue of one of the simulated experiments."""
    p1, p2 = _pose(*POSE_1), _pose(*POSE_2)
    if name == "1":
        return reachability_grid()
    if name == "2":
        return Scenario(
            name="exp-2",
            duration=40.0,
            targets={"right": SequenceScript([p1, p2, p1], hold=0.5)},
            mode="single",
            primary_arm="right",
            notes="alternating point-to-point reaches between two poses",
        )
    if name == "3":
        circle = CircleScript((-0.25, 0.15, 0.08), 0.08, CIRCLE_PERIOD, _pose((0, 0, 0), ORIENTATION_2))
        return Scenario(
            name="exp-3",
            duration=circle.approach + CIRCLE_PERIOD,
            targets={"right": circle},
            mode="single",
            primary_arm="right",
            notes="streamed circle, right arm",
        )
    if name == "4":
        right = CircleScript((-0.25, 0.12, 0.08), 0.1, CIRCLE_PERIOD, _pose((0, 0, 0), ORIENTATION_2), direction=1.0, phase=0.0)
        left = CircleScript(
            (-0.25, -0.12, 0.08), 0.1, CIRCLE_PERIOD, _pose((0, 0, 0), mirror_axis_angle(ORIENTATION_2)), direction=-1.0, phase=math.pi
        )
        return Scenario(
            name="exp-4",
            duration=right.approach + CIRCLE_PERIOD,
            targets={"right": right, "left": left},
            mode="dual",
            primary_arm="right",
            notes="mirrored counter-rotating circles; the inner halves overlap",
        )
    if name in EXP5_VELOCITIES:
        return Scenario(
            name=f"exp-{name}",
            duration=60.0,
            targets={"right": SequenceScript([p1, p2, p1, p2], hold=0.5)},
            mode="single",
            primary_arm="right",
            obstacles=[MovingObstacle(EXP5_PATHS[name][0], EXP5_VELOCITIES[name], 0.0, EXP5_PATHS[name][1])],
            notes="point-to-point reaches while a point obstacle crosses the workspace",
        )
    raise ScenarioError(f"unknown experiment {name!r}")


EXPERIMENTS = ("1", "2", "3", "4", "5-1", "5-2", "5-3")


def bundled_scenario_path(name: str) -> Path:
    """Path of the packaged scenario file for experiment ``name`` (for example ``"5-1"``)."""
    if name not in EXPERIMENTS:
        raise ScenarioError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    return Path(__file__).parent / "data" / "scenarios" / f"exp-{name}.yaml"
