"""Obstacle processing: sensor events and geometry to collision points and constraint rows.

Every obstacle, whatever its modality, ends up as a :class:`CollisionPoint`:
a point on the robot body, a unit direction toward the obstacle, a threat
level in [0, 1] and a modality gain. Each point yields one linear inequality
on joint velocities limiting the approach speed of that body point along the
direction.
"""

from __future__ import annotations

import logging
import queue
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from .kinematics import BodyPart, FrameSet, KinematicChain

log = logging.getLogger(__name__)

VISUAL = "visual"
PROXIMITY = "proximity"
TACTILE = "tactile"
SELF = "self"
STATIC = "static"

# sources recomputed from geometry every tick, never kept alive by decay
GEOMETRIC_SOURCES = (SELF, STATIC)


class ObstacleError(ValueError):
    pass


@dataclass
class AvoidanceParams:
    k1: float = 0.3
    k2: dict[str, float] = field(default_factory=lambda: {"torso": 0.06, "upper_arm": 0.06, "forearm": 0.33, "hand": 0.53})
    pps_range: float = 0.45
    survival_time: float = 2.0
    pressure_threshold: float = 0.05
    max_pressure: float = 1.0
    cluster_radius: float = 0.04
    self_collision_threshold: float = 0.06
    gains: dict[str, float] = field(
        default_factory=lambda: {TACTILE: 1.3, SELF: 1.2, PROXIMITY: 1.1, VISUAL: 1.0, STATIC: 1.0}
    )

    def __post_init__(self) -> None:
        scalars = (self.k1, self.pps_range, self.survival_time, self.pressure_threshold, self.max_pressure)
        if min(scalars) <= 0 or self.cluster_radius <= 0 or self.self_collision_threshold <= 0:
            raise ObstacleError("avoidance parameters must be positive")
        if any(v <= 0 for v in self.k2.values()) or any(v < 0 for v in self.gains.values()):
            raise ObstacleError("k2 values must be positive and gains non-negative")

    def k2_for(self, part: BodyPart) -> float:
        return self.k2.get(part.kind, part.k2)

    def check_model(self, chain: KinematicChain) -> None:
        missing = {p.kind for p in chain.body_parts.values()} - set(self.k2)
        if missing:
            raise ObstacleError(f"k2 missing for body part kinds {sorted(missing)}")


# -- sensor events -------------------------------------------------------------


@dataclass(frozen=True)
class VisualKeypoint:
    position: np.ndarray
    kind: str = "body"


@dataclass(frozen=True)
class ProximityReading:
    sensor: str
    distance: float


@dataclass(frozen=True)
class TactileContact:
    """One activated taxel; ``position`` and ``normal`` are in the frame of ``link``."""

    taxel: int
    link: int
    position: np.ndarray
    normal: np.ndarray
    pressure: float


SensorEvent = Union[VisualKeypoint, ProximityReading, TactileContact]


class EventQueue:
    """Thread-safe FIFO between sensor callbacks and the control loop."""

    def __init__(self) -> None:
        self._q: queue.SimpleQueue = queue.SimpleQueue()

    def put(self, event: SensorEvent) -> None:
        self._q.put(event)

    def drain(self) -> list[SensorEvent]:
        out = []
        while True:
            try:
                out.append(self._q.get_nowait())
            except queue.Empty:
                return out


# -- collision points ----------------------------------------------------------


@dataclass
class CollisionPoint:
    """A threatened point on the robot body.

    ``local`` is the point in the frame of ``link`` so it follows the body
    between refreshes; ``direction`` is a world-frame unit vector toward the
    obstacle.
    """

    key: tuple
    source: str
    part: str
    link: int
    local: np.ndarray
    position: np.ndarray
    direction: np.ndarray
    threat: float
    gain: float
    remaining: float
    sensed_threat: float = 0.0
    distance: float = np.inf
    age: float = 0.0

    def __post_init__(self) -> None:
        self.direction = _unit(self.direction)
        self.threat = float(np.clip(self.threat, 0.0, 1.0))
        if self.sensed_threat == 0.0:
            self.sensed_threat = self.threat

    def snapshot(self) -> dict:
        return {
            "source": self.source,
            "part": self.part,
            "position": [float(v) for v in self.position],
            "direction": [float(v) for v in self.direction],
            "threat": self.threat,
            "gain": self.gain,
            "remaining": self.remaining,
        }


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ObstacleError("collision direction must be non-zero")
    return v / n


@dataclass
class _PartCloud:
    part: BodyPart
    links: np.ndarray
    local: np.ndarray
    world: np.ndarray
    normals: np.ndarray


def part_cloud(frames: FrameSet, part: BodyPart) -> _PartCloud:
    """World positions and normals of a body part's surface samples."""
    cache = frames.__dict__.setdefault("_clouds", {})
    if part.name in cache:
        return cache[part.name]
    links, local, nrm = part.stacked()
    world = np.empty_like(local)
    wn = np.empty_like(nrm)
    for link in np.unique(links):
        sel = links == link
        F = frames.frames[link]
        world[sel] = local[sel] @ F[:3, :3].T + F[:3, 3]
        wn[sel] = nrm[sel] @ F[:3, :3].T
    cloud = _PartCloud(part, links, local, world, wn)
    cache[part.name] = cloud
    return cloud


def pairwise_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return cdist(A, B)


def closest_pair(A: np.ndarray, B: np.ndarray, tie_tol: float = 1e-12) -> tuple[int, int, float]:
    """Closest (i in A, j in B); ties within ``tie_tol`` go to the lowest j, then i."""
    D = pairwise_distances(A, B)
    dmin = float(D.min())
    cand = np.argwhere(D <= dmin + tie_tol)
    order = np.lexsort((cand[:, 0], cand[:, 1]))
    i, j = cand[order[0]]
    return int(i), int(j), float(D[i, j])


def controlled_parts(chain: KinematicChain, arms: Iterable[str]) -> list[BodyPart]:
    arms = set(arms)
    return [p for p in chain.body_parts.values() if p.arm is None or p.arm in arms]


def _direction(cloud: _PartCloud, i: int, target: np.ndarray, d: float) -> np.ndarray:
    if d > 1e-12:
        return (target - cloud.world[i]) / d
    # coincident with the sample: push along the outward normal
    return cloud.normals[i]


def project_visual(
    keypoints: Sequence[VisualKeypoint],
    frames: FrameSet,
    params: AvoidanceParams,
    parts: Sequence[BodyPart] | None = None,
) -> list[CollisionPoint]:
    """At most one point per body part, keyed to the closest keypoint in range."""
    if not keypoints:
        return []
    K = np.array([np.asarray(k.position, dtype=float) for k in keypoints]).reshape(-1, 3)
    parts = list(frames.chain.body_parts.values()) if parts is None else parts
    out = []
    for part in parts:
        cloud = part_cloud(frames, part)
        if len(cloud.world) == 0:
            continue
        i, j, d = closest_pair(cloud.world, K)
        if d > params.pps_range:
            continue
        out.append(
            CollisionPoint(
                key=(VISUAL, part.name),
                source=VISUAL,
                part=part.name,
                link=int(cloud.links[i]),
                local=cloud.local[i].copy(),
                position=cloud.world[i].copy(),
                direction=_direction(cloud, i, K[j], d),
                threat=1.0 - d / params.pps_range,
                gain=params.gains[VISUAL],
                remaining=params.survival_time,
                distance=d,
            )
        )
    return out


def project_proximity(
    readings: Sequence[ProximityReading],
    frames: FrameSet,
    params: AvoidanceParams,
) -> list[CollisionPoint]:
    chain = frames.chain
    out = []
    for r in readings:
        sensor = chain.proximity_sensors.get(r.sensor)
        if sensor is None:
            raise ObstacleError(f"unknown proximity sensor {r.sensor!r}")
        if r.distance < 0:
            raise ObstacleError("proximity distance must be non-negative")
        if r.distance >= params.pps_range:
            continue
        F = frames.frames[sensor.link]
        out.append(
            CollisionPoint(
                key=(PROXIMITY, sensor.name),
                source=PROXIMITY,
                part=chain.part_of_link(sensor.link).name,
                link=sensor.link,
                local=sensor.position.copy(),
                position=F[:3, :3] @ sensor.position + F[:3, 3],
                direction=F[:3, :3] @ sensor.direction,
                threat=1.0 - r.distance / params.pps_range,
                gain=params.gains[PROXIMITY],
                remaining=params.survival_time,
                distance=float(r.distance),
            )
        )
    return out


def cluster_tactile(
    contacts: Sequence[TactileContact],
    params: AvoidanceParams,
    frames: FrameSet | None = None,
) -> list[CollisionPoint]:
    """Merge above-threshold taxels into super contacts, one per neighbourhood.

    Clusters grow greedily around the highest remaining pressure. The super
    contact sits at the member centroid and takes the seed taxel's normal;
    its threat is the seed pressure scaled by ``max_pressure``. Without
    ``frames`` positions and directions stay in link coordinates.
    """
    active = [c for c in contacts if c.pressure >= params.pressure_threshold]
    out = []
    for link in sorted({c.link for c in active}):
        pool = sorted((c for c in active if c.link == link), key=lambda c: (-c.pressure, c.taxel))
        while pool:
            seed = pool[0]
            members = [c for c in pool if np.linalg.norm(np.asarray(c.position) - np.asarray(seed.position)) <= params.cluster_radius]
            pool = [c for c in pool if c not in members]
            local = np.mean([np.asarray(c.position, dtype=float) for c in members], axis=0)
            normal = np.asarray(seed.normal, dtype=float)
            if frames is not None:
                F = frames.frames[link]
                pos, direction = F[:3, :3] @ local + F[:3, 3], F[:3, :3] @ normal
                part = frames.chain.part_of_link(link).name
            else:
                pos, direction, part = local, normal, ""
            out.append(
                CollisionPoint(
                    key=(TACTILE, link, seed.taxel),
                    source=TACTILE,
                    part=part,
                    link=link,
                    local=local,
                    position=pos,
                    direction=direction,
                    threat=min(1.0, seed.pressure / params.max_pressure),
                    gain=params.gains[TACTILE],
                    remaining=params.survival_time,
                    distance=0.0,
                )
            )
    return out


def self_collision_threat(d: float) -> float:
    """Threat of a virtual obstacle ``d`` metres from the body, zero from 6 cm on."""
    return max(0.0, 1.0 - 50.0 * d / 3.0)


def _pair_point(frames, proj: BodyPart, obstacle_pts: np.ndarray, params, source, key) -> CollisionPoint | None:
    cloud = part_cloud(frames, proj)
    if len(cloud.world) == 0 or len(obstacle_pts) == 0:
        return None
    # cheap lower bound from the part's bounding sphere
    c = cloud.world.mean(axis=0)
    r = np.sqrt(np.max(np.sum((cloud.world - c) ** 2, axis=1)))
    if np.sqrt(np.min(np.sum((obstacle_pts - c) ** 2, axis=1))) - r >= params.self_collision_threshold:
        return None
    i, j, d = closest_pair(cloud.world, obstacle_pts)
    if d >= params.self_collision_threshold:
        return None
    return CollisionPoint(
        key=key,
        source=source,
        part=proj.name,
        link=int(cloud.links[i]),
        local=cloud.local[i].copy(),
        position=cloud.world[i].copy(),
        direction=_direction(cloud, i, obstacle_pts[j], d),
        threat=self_collision_threat(d),
        gain=params.gains[source],
        remaining=0.0,
        distance=d,
    )


def self_collision_pairs(chain: KinematicChain, mode: str, primary_arm: str, secondary_arm: str | None = None):
    """(projected part, obstacle part) pairs for self-collision checks.

    Projected parts are the hands and forearms of controlled arms. Every
    controlled arm avoids the torso; in dual mode the secondary arm also
    avoids the primary arm's hand, forearm and upper arm, not vice versa.
    """
    if mode not in ("single", "dual"):
        raise ObstacleError(f"unknown mode {mode!r}")
    arms = [primary_arm] if mode == "single" else [primary_arm, secondary_arm]
    parts = chain.body_parts.values()
    torso = [p for p in parts if p.kind == "torso"]
    primary_obstacles = [p for p in parts if p.arm == primary_arm and p.kind in ("hand", "forearm", "upper_arm")]
    pairs = []
    for arm in arms:
        for proj in (p for p in parts if p.arm == arm and p.kind in ("hand", "forearm")):
            for obs in torso:
                pairs.append((proj, obs))
            if mode == "dual" and arm != primary_arm:
                for obs in primary_obstacles:
                    pairs.append((proj, obs))
    return pairs


def self_collision_points(
    frames: FrameSet,
    params: AvoidanceParams,
    mode: str = "single",
    primary_arm: str = "right",
    secondary_arm: str | None = None,
) -> list[CollisionPoint]:
    chain = frames.chain
    if mode == "dual" and secondary_arm is None:
        secondary_arm = next(a for a in chain.arms if a != primary_arm)
    out = []
    for proj, obs in self_collision_pairs(chain, mode, primary_arm, secondary_arm):
        obstacle = part_cloud(frames, obs).world
        cp = _pair_point(frames, proj, obstacle, params, SELF, (SELF, proj.name, obs.name))
        if cp is not None:
            out.append(cp)
    return out


def static_obstacle_points(
    static_samples: np.ndarray,
    frames: FrameSet,
    params: AvoidanceParams,
    parts: Sequence[BodyPart] | None = None,
) -> list[CollisionPoint]:
    """Closest static sample per controlled body part, same rule as self-collision."""
    S = np.asarray(static_samples, dtype=float).reshape(-1, 3)
    if len(S) == 0:
        return []
    parts = list(frames.chain.body_parts.values()) if parts is None else parts
    out = []
    for part in parts:
        cp = _pair_point(frames, part, S, params, STATIC, (STATIC, part.name))
        if cp is not None:
            out.append(cp)
    return out


# -- persistence -----------------------------------------------------------------


def decay_and_expire(
    points: dict[tuple, CollisionPoint],
    dt: float,
    survival_time: float,
    refreshed: Iterable[CollisionPoint] = (),
) -> dict[tuple, CollisionPoint]:
    """Advance the collision set by ``dt``.

    Re-observed points replace their predecessors with a full survival time.
    Others age: the threat falls linearly from its last sensed value to zero
    over ``survival_time`` and the point is dropped when its time runs out.
    Geometric sources (self-collision, static objects) only live while
    re-observed.
    """
    if not dt > 0:
        raise ObstacleError("time step must be positive")
    out: dict[tuple, CollisionPoint] = {}
    fresh = {cp.key: cp for cp in refreshed}
    for key, cp in points.items():
        if key in fresh or cp.source in GEOMETRIC_SOURCES:
            continue
        age = cp.age + dt
        remaining = survival_time - age
        if remaining <= 1e-12:
            continue
        out[key] = replace(cp, age=age, remaining=remaining, threat=cp.sensed_threat * remaining / survival_time)
    for key, cp in fresh.items():
        out[key] = replace(cp, age=0.0, remaining=survival_time, sensed_threat=cp.threat)
    return out


class CollisionSet:
    """Collision points owned by the control loop, updated once per tick."""

    def __init__(self, params: AvoidanceParams):
        self.params = params
        self.points: dict[tuple, CollisionPoint] = {}

    def update(self, observed: Iterable[CollisionPoint], dt: float) -> None:
        self.points = decay_and_expire(self.points, dt, self.params.survival_time, observed)

    def __iter__(self):
        return iter(self.points.values())

    def __len__(self) -> int:
        return len(self.points)

    def refresh_positions(self, frames: FrameSet) -> None:
        for cp in self.points.values():
            F = frames.frames[cp.link]
            cp.position = F[:3, :3] @ cp.local + F[:3, 3]


def approach_limit(params: AvoidanceParams, gain: float, threat: float, k2: float) -> float:
    """Maximum approach speed toward the obstacle; negative means forced retreat."""
    return (params.k1 - gain * threat) * k2


def constraint_rows(
    points: Iterable[CollisionPoint],
    frames: FrameSet,
    params: AvoidanceParams,
    columns: dict[int, int],
    width: int,
) -> tuple[np.ndarray, np.ndarray, list[CollisionPoint]]:
    """One row ``n_C^T J_C qdot <= (k1 - V_C a_t) k2`` per point.

    ``columns`` maps joint index to decision-vector column; joints of the
    point's chain without a column contribute nothing. Rows that end up with
    no decision-variable coefficients are skipped.
    """
    chain = frames.chain
    rows, rhs, used = [], [], []
    for cp in points:
        J = frames.jacobian((cp.link, cp.local))
        row = cp.direction @ J.scatter(width, columns, "pos")
        if not np.any(row):
            log.debug("collision point %s has no controllable joints; skipped", cp.key)
            continue
        rows.append(row)
        rhs.append(approach_limit(params, cp.gain, cp.threat, params.k2_for(chain.part_of_link(cp.link))))
        used.append(cp)
    if not rows:
        return np.zeros((0, width)), np.zeros(0), []
    return np.array(rows), np.array(rhs), used
