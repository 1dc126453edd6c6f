"""Serial-chain kinematics for a dual-arm robot with a shared torso.

The robot is a kinematic tree of revolute joints. Each joint carries a
standard DH row ``Rz(theta + offset) Tz(d) Tx(a) Rx(alpha)`` and an optional
fixed ``mount`` transform applied between its parent frame and its DH row;
the mount is how the two arms attach to the shared chest frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

BODY_PART_KINDS = ("torso", "upper_arm", "forearm", "hand")


class KinematicsError(ValueError):
    """Raised for malformed models, unknown selectors or bad joint vectors."""


# ---------------------------------------------------------------------------
# SO(3) utilities
# ---------------------------------------------------------------------------


def skew(v: Sequence[float]) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_rotation(r: Sequence[float]) -> np.ndarray:
    """Matrix exponential of the skew matrix of rotation vector ``r`` (Rodrigues)."""
    r = np.asarray(r, dtype=float)
    theta = float(np.linalg.norm(r))
    K = skew(r)
    if theta < 1e-8:
        # second-order Taylor expansion keeps the result orthonormal to ~1e-16
        return np.eye(3) + K + 0.5 * K @ K
    s = np.sin(theta) / theta
    c = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + s * K + c * K @ K


def rotation_to_axis_angle(R: np.ndarray, atol: float = 1e-8) -> np.ndarray:
    """Matrix logarithm of ``R`` as a rotation vector with angle in [0, pi].

    At an angle of exactly pi the axis sign is ambiguous; the branch with the
    largest positive component along the dominant axis is returned.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise KinematicsError(f"expected a 3x3 matrix, got shape {R.shape}")
    if not np.allclose(R @ R.T, np.eye(3), atol=atol) or abs(np.linalg.det(R) - 1.0) > atol:
        raise KinematicsError("matrix is not a proper rotation")
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # atan2 keeps full precision near 0 and pi, where arccos loses half the digits
    theta = float(np.arctan2(0.5 * np.linalg.norm(w), cos_theta))
    if theta < 1e-6:
        # log(R) ~ (R - R^T) / 2 near identity
        return 0.5 * w
    if np.pi - theta > 1e-3:
        return theta / (2.0 * np.sin(theta)) * w
    # near pi the skew part vanishes; sym(R) = cos(t) I + (1 - cos(t)) u u^T
    S = 0.5 * (R + R.T)
    B = (S - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    i = int(np.argmax(np.diag(B)))
    u = B[:, i] / np.sqrt(B[i, i])
    u /= np.linalg.norm(u)
    if np.linalg.norm(w) > 1e-12:
        if np.dot(u, w) < 0.0:
            u = -u
    elif u[i] < 0.0:
        u = -u
    return theta * u


def geodesic_angle(R1: np.ndarray, R2: np.ndarray) -> float:
    """Angle of the relative rotation ``R2 R1^T`` in [0, pi]."""
    M = R2 @ R1.T
    c = (np.trace(M) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.arctan2(s, c))


def make_transform(R: np.ndarray | None = None, p: Sequence[float] | None = None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if p is not None:
        T[:3, 3] = p
    return T


def dh_transform(a: float, d: float, alpha: float, theta: float) -> np.ndarray:
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    return np.array(
        [
            [ct, -st * ca, st * sa, a * ct],
            [st, ct * ca, -ct * sa, a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


# ---------------------------------------------------------------------------
# Model types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Position (m) and orientation as a rotation vector (rad)."""

    position: np.ndarray
    orientation: np.ndarray

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        return cls(np.array(T[:3, 3], dtype=float), rotation_to_axis_angle(T[:3, :3]))

    @classmethod
    def from_axis_angle4(cls, position: Sequence[float], axis_angle: Sequence[float]) -> "Pose":
        """Build from ``[ux, uy, uz, angle]`` notation; the axis is normalized."""
        u = np.asarray(axis_angle[:3], dtype=float)
        u = u / np.linalg.norm(u)
        return cls(np.asarray(position, dtype=float), canonical_rotvec(u * float(axis_angle[3])))

    @property
    def rotation(self) -> np.ndarray:
        return axis_angle_to_rotation(self.orientation)

    def matrix(self) -> np.ndarray:
        return make_transform(self.rotation, self.position)


def canonical_rotvec(r: Sequence[float]) -> np.ndarray:
    """Re-express ``r`` with its angle wrapped into [0, pi]."""
    return rotation_to_axis_angle(axis_angle_to_rotation(r))


@dataclass(frozen=True)
class Joint:
    name: str
    a: float
    d: float
    alpha: float
    offset: float
    lower: float
    upper: float
    velocity_limit: float
    parent: int | None = None
    mount: np.ndarray | None = None


@dataclass
class BodyPart:
    """A rigid group of links sharing one avoidance gain.

    ``samples`` and ``normals`` map a link index to (k, 3) arrays expressed in
    that link's frame; ``normals`` are outward unit vectors of the sampled
    surface.
    """

    name: str
    kind: str
    arm: str | None
    links: list[int]
    k2: float
    samples: dict[int, np.ndarray] = field(default_factory=dict)
    normals: dict[int, np.ndarray] = field(default_factory=dict)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (link ids, local points, local normals) over all member links."""
        ids, pts, nrm = [], [], []
        for link in self.links:
            p = self.samples.get(link)
            if p is None or len(p) == 0:
                continue
            ids.append(np.full(len(p), link))
            pts.append(p)
            nrm.append(self.normals[link])
        if not ids:
            return np.zeros(0, dtype=int), np.zeros((0, 3)), np.zeros((0, 3))
        return np.concatenate(ids), np.vstack(pts), np.vstack(nrm)


@dataclass(frozen=True)
class ProximitySensor:
    name: str
    link: int
    position: np.ndarray
    direction: np.ndarray


@dataclass
class KinematicChain:
    """Kinematic tree of revolute joints with body-part segmentation.

    ``torso`` lists the shared joint indices; ``arms`` maps an arm name to its
    own (non-torso) joint indices. The end effector of an arm is the frame of
    its last joint.
    """

    joints: list[Joint]
    torso: list[int]
    arms: dict[str, list[int]]
    body_parts: dict[str, BodyPart] = field(default_factory=dict)
    base: np.ndarray = field(default_factory=lambda: np.eye(4))
    proximity_sensors: dict[str, ProximitySensor] = field(default_factory=dict)
    name: str = "robot"

    def __post_init__(self) -> None:
        self.validate()
        self._link_part: dict[int, str] = {}
        for part in self.body_parts.values():
            for link in part.links:
                self._link_part[link] = part.name
        self._names = {j.name: i for i, j in enumerate(self.joints)}

    @property
    def dof(self) -> int:
        return len(self.joints)

    def validate(self) -> None:
        for i, j in enumerate(self.joints):
            if not j.lower < j.upper:
                raise KinematicsError(f"joint {j.name}: lower limit must be below upper limit")
            if not j.velocity_limit > 0:
                raise KinematicsError(f"joint {j.name}: velocity limit must be positive")
            if j.parent is not None and not 0 <= j.parent < i:
                raise KinematicsError(f"joint {j.name}: parent must precede the joint")
        seen: dict[int, str] = {}
        for part in self.body_parts.values():
            if part.kind not in BODY_PART_KINDS:
                raise KinematicsError(f"body part {part.name}: unknown kind {part.kind!r}")
            for link in part.links:
                if link in seen:
                    raise KinematicsError(f"link {link} belongs to both {seen[link]} and {part.name}")
                seen[link] = part.name
        if self.body_parts and len(seen) != self.dof:
            missing = sorted(set(range(self.dof)) - set(seen))
            raise KinematicsError(f"links without a body part: {missing}")
        torso = set(self.torso)
        for arm, idx in self.arms.items():
            if torso & set(idx):
                raise KinematicsError(f"arm {arm} repeats torso joints")
            chain = self.ancestors(idx[-1])
            if chain[: len(self.torso)] != list(self.torso):
                raise KinematicsError(f"arm {arm} does not hang from the full torso")

    # -- structure -----------------------------------------------------------

    def link_index(self, link: int | str) -> int:
        if isinstance(link, (int, np.integer)):
            if not 0 <= int(link) < self.dof:
                raise KinematicsError(f"unknown link index {link}")
            return int(link)
        if link in self._names:
            return self._names[link]
        raise KinematicsError(f"unknown link {link!r}")

    def ancestors(self, link: int) -> list[int]:
        """Joint indices from the base to ``link`` inclusive."""
        path = []
        j: int | None = link
        while j is not None:
            path.append(j)
            j = self.joints[j].parent
        return path[::-1]

    def arm_of_link(self, link: int) -> str | None:
        for arm, idx in self.arms.items():
            if link in idx:
                return arm
        return None

    def part_of_link(self, link: int) -> BodyPart:
        return self.body_parts[self._link_part[link]]

    def end_effector(self, arm: str) -> int:
        if arm not in self.arms:
            raise KinematicsError(f"unknown arm {arm!r}")
        return self.arms[arm][-1]

    def chain_joints(self, arm: str) -> list[int]:
        return list(self.torso) + list(self.arms[arm])

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    @property
    def velocity_limits(self) -> np.ndarray:
        return np.array([j.velocity_limit for j in self.joints])

    def evaluate(self, q: Sequence[float]) -> "FrameSet":
        return FrameSet(self, q)


Selector = Union[str, int, tuple]


@dataclass(frozen=True)
class JacobianBlocks:
    """Geometric Jacobian of a point split into torso and arm blocks."""

    torso_pos: np.ndarray
    torso_ori: np.ndarray
    arm_pos: np.ndarray
    arm_ori: np.ndarray
    torso_joints: tuple[int, ...]
    arm_joints: tuple[int, ...]

    @property
    def joints(self) -> tuple[int, ...]:
        return self.torso_joints + self.arm_joints

    @property
    def pos(self) -> np.ndarray:
        return np.hstack([self.torso_pos, self.arm_pos])

    @property
    def ori(self) -> np.ndarray:
        return np.hstack([self.torso_ori, self.arm_ori])

    @property
    def full(self) -> np.ndarray:
        """6 x k Jacobian over :attr:`joints` (linear rows first)."""
        return np.vstack([self.pos, self.ori])

    def scatter(self, n: int, columns: dict[int, int] | None = None, block: str = "pos") -> np.ndarray:
        """Place the pos/ori block into an ``3 x n`` matrix.

        ``columns`` maps joint index to column; identity when omitted. Joints
        without a column are dropped.
        """
        src = self.pos if block == "pos" else self.ori
        out = np.zeros((3, n))
        for k, j in enumerate(self.joints):
            col = j if columns is None else columns.get(j)
            if col is not None:
                out[:, col] = src[:, k]
        return out


class FrameSet:
    """All link frames of a chain evaluated at one configuration."""

    def __init__(self, chain: KinematicChain, q: Sequence[float]):
        q = np.asarray(q, dtype=float)
        if q.shape != (chain.dof,):
            raise KinematicsError(f"expected {chain.dof} joint values, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise KinematicsError("joint vector contains non-finite values")
        self.chain = chain
        self.q = q
        n = chain.dof
        self.frames = np.empty((n, 4, 4))
        # frame in which each joint rotates (z axis = joint axis)
        self.joint_frames = np.empty((n, 4, 4))
        for i, j in enumerate(chain.joints):
            parent = chain.base if j.parent is None else self.frames[j.parent]
            pre = parent if j.mount is None else parent @ j.mount
            self.joint_frames[i] = pre
            self.frames[i] = pre @ dh_transform(j.a, j.d, j.alpha, q[i] + j.offset)
        self._jac_cache: dict = {}

    def link_frame(self, link: int | str) -> np.ndarray:
        return self.frames[self.chain.link_index(link)]

    def _resolve(self, sel: Selector) -> tuple[int | None, np.ndarray]:
        """Map a selector to (link or None for base, local point)."""
        chain = self.chain
        if isinstance(sel, tuple):
            if len(sel) != 2:
                raise KinematicsError(f"point selector must be (link, xyz), got {sel!r}")
            link, local = sel
            if link == "base":
                return None, np.asarray(local, dtype=float)
            return chain.link_index(link), np.asarray(local, dtype=float)
        if isinstance(sel, str):
            if sel == "base":
                return None, np.zeros(3)
            if sel in chain.arms:
                return chain.end_effector(sel), np.zeros(3)
        return chain.link_index(sel), np.zeros(3)

    def transform(self, sel: Selector) -> np.ndarray:
        link, local = self._resolve(sel)
        T = (self.chain.base if link is None else self.frames[link]).copy()
        T[:3, 3] = T[:3, :3] @ local + T[:3, 3]
        return T

    def pose(self, sel: Selector) -> Pose:
        return Pose.from_matrix(self.transform(sel))

    def points(self, link: int, local: np.ndarray) -> np.ndarray:
        F = self.frames[link]
        return local @ F[:3, :3].T + F[:3, 3]

    def jacobian(self, sel: Selector) -> JacobianBlocks:
        key = sel if not isinstance(sel, tuple) else (sel[0], tuple(np.asarray(sel[1], dtype=float).tolist()))
        hit = self._jac_cache.get(key)
        if hit is None:
            hit = self._jacobian(sel)
            self._jac_cache[key] = hit
        return hit

    def _jacobian(self, sel: Selector) -> JacobianBlocks:
        link, local = self._resolve(sel)
        chain = self.chain
        if link is None:
            path: list[int] = []
            p = chain.base[:3, :3] @ local + chain.base[:3, 3]
        else:
            path = chain.ancestors(link)
            F = self.frames[link]
            p = F[:3, :3] @ local + F[:3, 3]
        torso = list(chain.torso)
        arm = [j for j in path if j not in chain.torso]
        on_path = np.isin(torso, path)
        z = self.joint_frames[:, :3, 2]
        o = self.joint_frames[:, :3, 3]
        # torso blocks always span every torso joint, zero past the point's link
        t_ori = (z[torso] * on_path[:, None]).T
        t_pos = np.cross(t_ori.T, p - o[torso]).T
        a_ori = z[arm].T.reshape(3, len(arm))
        a_pos = np.cross(z[arm], p - o[arm]).T.reshape(3, len(arm))
        return JacobianBlocks(t_pos, t_ori, a_pos, a_ori, tuple(torso), tuple(arm))


def forward_kinematics(chain: KinematicChain, q: Sequence[float], frame: Selector) -> Pose:
    """Pose of a link frame, arm end effector, or ``(link, local_point)``."""
    return FrameSet(chain, q).pose(frame)


def jacobian(chain: KinematicChain, q: Sequence[float], point: Selector) -> JacobianBlocks:
    return FrameSet(chain, q).jacobian(point)


def manipulability(J: np.ndarray) -> float:
    """Yoshikawa index sqrt(det(J J^T)); zero at singular configurations."""
    J = np.asarray(J, dtype=float)
    det = np.linalg.det(J @ J.T)
    return float(np.sqrt(max(det, 0.0)))
