"""Robot model files: YAML (de)serialization and the bundled 17-DoF model builder.

The bundled model is an approximation of an iCub upper body (two 7-DoF arms on
a 3-DoF torso). Root frame: x backward, y toward the right arm, z up, origin
at the torso pitch axis. Link geometry is a set of capsules per link whose
surfaces are sampled offline and stored in the model file.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .kinematics import (
    BodyPart,
    Joint,
    KinematicChain,
    KinematicsError,
    ProximitySensor,
    make_transform,
)

FORMAT_VERSION = 1
SAMPLE_SPACING = 0.025

# k2 per body-part kind (approach-velocity scale, m/s)
DEFAULT_K2 = {"torso": 0.06, "upper_arm": 0.06, "forearm": 0.33, "hand": 0.53}


def capsule_samples(p0, p1, radius: float, spacing: float = SAMPLE_SPACING) -> tuple[np.ndarray, np.ndarray]:
    """Regularly sample the surface of a capsule; returns (points, outward normals).

    Neighbouring samples are at most ``spacing`` apart along both the axis and
    the circumference.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    axis = p1 - p0
    length = float(np.linalg.norm(axis))
    if length < 1e-12:
        axis = np.array([0.0, 0.0, 1.0])
    else:
        axis = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)

    def ring(r: float) -> int:
        return max(3, int(np.ceil(2 * np.pi * r / spacing))) if r > 1e-9 else 1

    pts, nrm = [], []
    n_axial = max(1, int(np.ceil(length / spacing)))
    n_circ = ring(radius)
    phis = 2 * np.pi * np.arange(n_circ) / n_circ
    for s in np.linspace(0.0, length, n_axial + 1):
        for phi in phis:
            n = np.cos(phi) * e1 + np.sin(phi) * e2
            pts.append(p0 + s * axis + radius * n)
            nrm.append(n)
    # hemispherical caps, latitude rings from the equator (excluded) to the pole
    n_lat = max(1, int(np.ceil(0.5 * np.pi * radius / spacing)))
    for sign, centre in ((-1.0, p0), (1.0, p1)):
        for k in range(1, n_lat + 1):
            beta = 0.5 * np.pi * k / n_lat
            r_ring = radius * np.cos(beta)
            m = ring(r_ring)
            for phi in 2 * np.pi * np.arange(m) / m:
                n = np.cos(beta) * (np.cos(phi) * e1 + np.sin(phi) * e2) + sign * np.sin(beta) * axis
                pts.append(centre + radius * n)
                nrm.append(n)
    return np.array(pts), np.array(nrm)


# ---------------------------------------------------------------------------
# YAML I/O
# ---------------------------------------------------------------------------


def _mat(x) -> np.ndarray | None:
    return None if x is None else np.asarray(x, dtype=float)


def _round(a: np.ndarray, nd: int = 6) -> list:
    return np.round(np.asarray(a, dtype=float), nd).tolist()


def chain_from_dict(doc: dict[str, Any]) -> KinematicChain:
    if doc.get("format_version") != FORMAT_VERSION:
        raise KinematicsError(f"unsupported model format_version {doc.get('format_version')!r}")
    names = [j["name"] for j in doc["joints"]]
    index = {n: i for i, n in enumerate(names)}
    if len(index) != len(names):
        raise KinematicsError("duplicate joint names")

    def idx(name: str) -> int:
        if name not in index:
            raise KinematicsError(f"unknown joint {name!r}")
        return index[name]

    joints = []
    for j in doc["joints"]:
        dh = j["dh"]
        lim = j["limits"]
        parent = j.get("parent")
        joints.append(
            Joint(
                name=j["name"],
                a=float(dh["a"]),
                d=float(dh["d"]),
                alpha=float(dh["alpha"]),
                offset=float(dh["offset"]),
                lower=float(lim["lower"]),
                upper=float(lim["upper"]),
                velocity_limit=float(lim["velocity"]),
                parent=None if parent is None else idx(parent),
                mount=_mat(j.get("mount")),
            )
        )
    parts = {}
    for p in doc.get("body_parts", []):
        links = [idx(n) for n in p["links"]]
        samples = {idx(k): np.asarray(v, dtype=float).reshape(-1, 3) for k, v in p.get("samples", {}).items()}
        normals = {idx(k): np.asarray(v, dtype=float).reshape(-1, 3) for k, v in p.get("normals", {}).items()}
        if samples.keys() != normals.keys() or any(len(samples[k]) != len(normals[k]) for k in samples):
            raise KinematicsError(f"body part {p['name']}: samples and normals do not match")
        parts[p["name"]] = BodyPart(
            name=p["name"],
            kind=p["kind"],
            arm=p.get("arm"),
            links=links,
            k2=float(p.get("k2", DEFAULT_K2.get(p["kind"], 0.0))),
            samples=samples,
            normals=normals,
        )
    sensors = {}
    for s in doc.get("proximity_sensors", []):
        d = np.asarray(s["direction"], dtype=float)
        sensors[s["name"]] = ProximitySensor(s["name"], idx(s["link"]), np.asarray(s["position"], dtype=float), d / np.linalg.norm(d))
    sharing = doc["torso_sharing"]
    return KinematicChain(
        joints=joints,
        torso=[idx(n) for n in sharing["torso"]],
        arms={arm: [idx(n) for n in js] for arm, js in sharing["arms"].items()},
        body_parts=parts,
        base=np.asarray(doc.get("base", np.eye(4).tolist()), dtype=float),
        proximity_sensors=sensors,
        name=doc.get("name", "robot"),
    )


def chain_to_dict(chain: KinematicChain) -> dict[str, Any]:
    names = [j.name for j in chain.joints]
    joints = []
    for j in chain.joints:
        joints.append(
            {
                "name": j.name,
                "parent": None if j.parent is None else names[j.parent],
                "dh": {"a": float(j.a), "d": float(j.d), "alpha": round(float(j.alpha), 12), "offset": round(float(j.offset), 12)},
                "mount": None if j.mount is None else _round(j.mount, 12),
                "limits": {
                    "lower": round(float(j.lower), 12),
                    "upper": round(float(j.upper), 12),
                    "velocity": float(j.velocity_limit),
                },
            }
        )
    parts = []
    for p in chain.body_parts.values():
        parts.append(
            {
                "name": p.name,
                "kind": p.kind,
                "arm": p.arm,
                "k2": float(p.k2),
                "links": [names[i] for i in p.links],
                "samples": {names[k]: _round(v) for k, v in p.samples.items()},
                "normals": {names[k]: _round(v) for k, v in p.normals.items()},
            }
        )
    return {
        "format_version": FORMAT_VERSION,
        "name": chain.name,
        "base": _round(chain.base, 12),
        "torso_sharing": {
            "torso": [names[i] for i in chain.torso],
            "arms": {arm: [names[i] for i in idx] for arm, idx in chain.arms.items()},
        },
        "joints": joints,
        "body_parts": parts,
        "proximity_sensors": [
            {"name": s.name, "link": names[s.link], "position": _round(s.position), "direction": _round(s.direction)}
            for s in chain.proximity_sensors.values()
        ],
    }


class _FlowDumper(yaml.SafeDumper):
    pass


def _represent_list(dumper, data):
    # inner numeric lists inline, everything else block style
    flow = all(not isinstance(x, (list, dict)) for x in data)
    return dumper.represent_sequence("tag:yaml.org,2002:seq", data, flow_style=flow)


_FlowDumper.add_representer(list, _represent_list)


def load_yaml(text: str):
    """Parse YAML with the libyaml loader when available."""
    loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)
    return yaml.load(text, Loader=loader)


def dump_yaml(doc: dict, path: str | Path | None = None) -> str:
    text = yaml.dump(doc, Dumper=_FlowDumper, sort_keys=False, width=120)
    if path is not None:
        Path(path).write_text(text)
    return text


def load_model(path: str | Path | None = None) -> KinematicChain:
    """Load a robot model file; the bundled model when ``path`` is None."""
    if path is None:
        text = resources.files("reactive_control").joinpath("data/robot_model.yaml").read_text()
    else:
        text = Path(path).read_text()
    return chain_from_dict(load_yaml(text))


def save_model(chain: KinematicChain, path: str | Path) -> None:
    dump_yaml(chain_to_dict(chain), path)


# ---------------------------------------------------------------------------
# Bundled model
# ---------------------------------------------------------------------------

SHOULDER_Y = 0.11
SHOULDER_Z = 0.175
UPPER_ARM = 0.152
FOREARM = 0.137
HAND = 0.06


def _arm_rows(side: str) -> list[tuple]:
    """(name, a, d, alpha, offset, lower_deg, upper_deg, vmax) for one arm.

    Both arms share the same DH rows; sign conventions of roll, yaw and wrist
    yaw are therefore mirrored between sides, reflected in the limits.
    """
    pi = np.pi
    roll = (-160.0, 0.0) if side == "right" else (0.0, 160.0)
    yaw = (-90.0, 40.0) if side == "right" else (-40.0, 90.0)
    prosup = (-90.0, 90.0)
    wyaw = (-30.0, 30.0)
    p = side[0]
    return [
        (f"{p}_shoulder_pitch", 0.0, 0.0, pi / 2, 0.0, -10.0, 95.0, 2.0),
        (f"{p}_shoulder_roll", 0.0, 0.0, -pi / 2, pi / 2, *roll, 2.0),
        (f"{p}_shoulder_yaw", 0.0, UPPER_ARM, pi / 2, pi / 2, *yaw, 2.0),
        (f"{p}_elbow", 0.0, 0.0, -pi / 2, 0.0, 5.0, 110.0, 2.0),
        (f"{p}_wrist_prosup", 0.0, FOREARM, pi / 2, pi, *prosup, 2.0),
        (f"{p}_wrist_pitch", 0.0, 0.0, -pi / 2, pi / 2, -65.0, 25.0, 2.0),
        (f"{p}_wrist_yaw", HAND, 0.0, 0.0, 0.0, *wyaw, 2.0),
    ]


def build_bundled_model(spacing: float = SAMPLE_SPACING) -> KinematicChain:
    """Construct the bundled iCub-like 17-DoF model including surface samples."""
    pi = np.pi
    deg = np.deg2rad
    base = make_transform(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]))
    joints = [
        Joint("torso_pitch", 0.0, 0.0, -pi / 2, 0.0, deg(-60.0), deg(20.0), 1.0, None, None),
        Joint("torso_roll", 0.0, 0.0, pi / 2, pi / 2, deg(-30.0), deg(30.0), 1.0, 0, None),
        Joint("torso_yaw", 0.0, 0.0, 0.0, 0.0, deg(-50.0), deg(50.0), 1.0, 1, None),
    ]
    arms: dict[str, list[int]] = {}
    # chest frame: x = -y_root, y = x_root, z = z_root; arm base z along +y_root
    R_mount = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    for side, sgn in (("right", 1.0), ("left", -1.0)):
        mount = make_transform(R_mount, [-sgn * SHOULDER_Y, 0.0, SHOULDER_Z])
        start = len(joints)
        for k, (name, a, d, alpha, off, lo, hi, vmax) in enumerate(_arm_rows(side)):
            parent = 2 if k == 0 else start + k - 1
            joints.append(Joint(name, a, d, alpha, off, deg(lo), deg(hi), vmax, parent, mount if k == 0 else None))
        arms[side] = list(range(start, start + 7))

    skeleton = KinematicChain(joints=joints, torso=[0, 1, 2], arms=arms, base=base)
    fs = skeleton.evaluate(np.zeros(len(joints)))

    def local(link: int, world_pts: np.ndarray) -> np.ndarray:
        F = fs.frames[link]
        return (world_pts - F[:3, 3]) @ F[:3, :3]

    def local_dir(link: int, world_dirs: np.ndarray) -> np.ndarray:
        return world_dirs @ fs.frames[link][:3, :3]

    def sampled(link: int, capsules: list[tuple]) -> tuple[np.ndarray, np.ndarray]:
        P, N = [], []
        for p0, p1, r in capsules:
            p, n = capsule_samples(p0, p1, r, spacing)
            P.append(p)
            N.append(n)
        P, N = np.vstack(P), np.vstack(N)
        return local(link, P), local_dir(link, N)

    parts: dict[str, BodyPart] = {}
    chest = 2
    torso_caps = [
        ((0.0, 0.0, 0.0), (0.0, 0.0, 0.13), 0.06),
        ((0.0, -0.055, 0.175), (0.0, 0.055, 0.175), 0.045),
    ]
    P, N = sampled(chest, torso_caps)
    parts["torso"] = BodyPart("torso", "torso", None, [0, 1, 2], DEFAULT_K2["torso"], {chest: P}, {chest: N})
    for side, idx in arms.items():
        p = side[0]
        sh, _, yaw, el, pro, wp, wy = idx
        o_sh = fs.frames[sh][:3, 3]
        o_el = fs.frames[yaw][:3, 3]
        o_wr = fs.frames[pro][:3, 3]
        o_ee = fs.frames[wy][:3, 3]
        fingers = o_ee + 0.03 * (o_ee - o_wr) / np.linalg.norm(o_ee - o_wr)
        Pu, Nu = sampled(yaw, [(o_sh, o_el, 0.03)])
        Pf, Nf = sampled(pro, [(o_el, o_wr, 0.025)])
        Ph, Nh = sampled(wy, [(o_wr, fingers, 0.022)])
        parts[f"{p}_upper_arm"] = BodyPart(f"{p}_upper_arm", "upper_arm", side, [sh, idx[1], yaw], DEFAULT_K2["upper_arm"], {yaw: Pu}, {yaw: Nu})
        parts[f"{p}_forearm"] = BodyPart(f"{p}_forearm", "forearm", side, [el, pro], DEFAULT_K2["forearm"], {pro: Pf}, {pro: Nf})
        parts[f"{p}_hand"] = BodyPart(f"{p}_hand", "hand", side, [wp, wy], DEFAULT_K2["hand"], {wy: Ph}, {wy: Nh})

    sensors = {}
    for side, idx in arms.items():
        # back of the hand: the palm normal is +z of the hand frame
        name = f"{side[0]}_hand_proximity"
        sensors[name] = ProximitySensor(name, idx[-1], np.array([-0.02, 0.0, -0.022]), np.array([0.0, 0.0, -1.0]))

    return KinematicChain(
        joints=joints,
        torso=[0, 1, 2],
        arms=arms,
        body_parts=parts,
        base=base,
        proximity_sensors=sensors,
        name="icub-like-17dof",
    )


def bundled_model_path() -> Path:
    return Path(str(resources.files("reactive_control").joinpath("data/robot_model.yaml")))
