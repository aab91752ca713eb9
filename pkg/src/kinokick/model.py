"""Robot description: links, joints, contact points, keypoints.

A model is a kinematic tree in which joint ``j`` carries link ``j``.  Joint 0
is the floating base (parent -1); every other joint is revolute.  The
configuration vector is ``q = [base position (3), base quaternion w,x,y,z (4),
joint angles (n)]`` and the velocity vector is ``v = [base linear velocity in
world (3), base angular velocity in body frame (3), joint rates (n)]``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

FLOATING = "floating-base"
REVOLUTE = "revolute"


class ModelError(ValueError):
    """Base class for model loading failures."""


class ModelParseError(ModelError):
    """The document does not match the model schema."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class ModelValidationError(ModelError):
    """A structural invariant of the model is violated."""

    def __init__(self, invariant: str, message: str):
        self.invariant = invariant
        super().__init__(f"{invariant}: {message}")


@dataclass(frozen=True, eq=False)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float


@dataclass(frozen=True, eq=False)
class Link:
    name: str
    mass: float
    com_offset: np.ndarray
    inertia: np.ndarray  # 3x3 about the link CoM, link frame
    capsule: Capsule | None = None


@dataclass(frozen=True, eq=False)
class Joint:
    name: str
    kind: str
    parent: int
    origin: np.ndarray  # joint position in the parent link frame
    axis: np.ndarray | None = None
    q_min: float = -np.inf
    q_max: float = np.inf
    v_min: float = -np.inf
    v_max: float = np.inf
    tau_min: float = -np.inf
    tau_max: float = np.inf


@dataclass(frozen=True, eq=False)
class Marker:
    """A named point rigidly attached to a link (contact point or keypoint)."""

    name: str
    link: int
    offset: np.ndarray


@dataclass(frozen=True, eq=False)
class RobotModel:
    name: str
    links: list[Link]
    joints: list[Joint]
    contact_points: list[Marker]
    keypoints: list[Marker]
    collision_pairs: list[tuple[int, int]]
    tags: dict = field(default_factory=dict)

    # -- sizes -------------------------------------------------------------
    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_joints(self) -> int:
        """Number of actuated (revolute) joints."""
        return len(self.joints) - 1

    @property
    def nq(self) -> int:
        return self.n_joints + 7

    @property
    def nv(self) -> int:
        return self.n_joints + 6

    @property
    def n_contacts(self) -> int:
        return len(self.contact_points)

    @cached_property
    def total_mass(self) -> float:
        return float(sum(link.mass for link in self.links))

    # -- cached arrays used by the kinematics kernels ----------------------
    @cached_property
    def parents(self) -> np.ndarray:
        return np.array([j.parent for j in self.joints], dtype=int)

    @cached_property
    def order(self) -> list[int]:
        """Joint indices sorted so that every parent precedes its children."""
        children: dict[int, list[int]] = {i: [] for i in range(len(self.joints))}
        for i, j in enumerate(self.joints):
            if j.parent >= 0:
                children[j.parent].append(i)
        out, stack = [], [0]
        while stack:
            i = stack.pop()
            out.append(i)
            stack.extend(reversed(children[i]))
        return out

    @cached_property
    def ancestors(self) -> list[list[int]]:
        """For every link, the revolute joints between it and the base (inclusive)."""
        out = []
        for i in range(len(self.joints)):
            chain, j = [], i
            while j > 0:
                chain.append(j)
                j = self.joints[j].parent
            out.append(chain[::-1])
        return out

    @cached_property
    def origins(self) -> np.ndarray:
        return np.array([j.origin for j in self.joints])

    @cached_property
    def axes(self) -> np.ndarray:
        return np.array([j.axis if j.axis is not None else np.zeros(3) for j in self.joints])

    @cached_property
    def masses(self) -> np.ndarray:
        return np.array([link.mass for link in self.links])

    @cached_property
    def com_offsets(self) -> np.ndarray:
        return np.array([link.com_offset for link in self.links])

    @cached_property
    def inertias(self) -> np.ndarray:
        return np.array([link.inertia for link in self.links])

    def _limits(self, lo: str, hi: str) -> tuple[np.ndarray, np.ndarray]:
        js = self.joints[1:]
        return (np.array([getattr(j, lo) for j in js], dtype=float),
                np.array([getattr(j, hi) for j in js], dtype=float))

    @cached_property
    def position_limits(self) -> tuple[np.ndarray, np.ndarray]:
        return self._limits("q_min", "q_max")

    @cached_property
    def velocity_limits(self) -> tuple[np.ndarray, np.ndarray]:
        return self._limits("v_min", "v_max")

    @cached_property
    def torque_limits(self) -> tuple[np.ndarray, np.ndarray]:
        return self._limits("tau_min", "tau_max")

    # -- lookups -----------------------------------------------------------
    def link_index(self, name: str) -> int:
        for i, link in enumerate(self.links):
            if link.name == name:
                return i
        raise KeyError(name)

    def joint_index(self, name: str) -> int:
        """Index of a revolute joint within the actuated block (0..n-1)."""
        for i, j in enumerate(self.joints):
            if j.name == name:
                if i == 0:
                    raise KeyError(f"{name} is the floating base")
                return i - 1
        raise KeyError(name)

    def keypoint_index(self, name: str) -> int:
        for i, k in enumerate(self.keypoints):
            if k.name == name:
                return i
        raise KeyError(name)

    @property
    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints[1:]]

    def neutral_configuration(self) -> np.ndarray:
        q = np.zeros(self.nq)
        q[3] = 1.0
        return q

    def digest(self) -> str:
        text = json.dumps(serialize_model(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# (de)serialization
# ---------------------------------------------------------------------------

def _vec3(value, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ModelParseError(where, "expected a 3-element numeric array") from None
    if arr.shape != (3,):
        raise ModelParseError(where, f"expected a 3-element array, got shape {arr.shape}")
    return arr


def _number(obj: dict, key: str, where: str, default=None) -> float:
    if key not in obj:
        if default is None:
            raise ModelParseError(f"{where}.{key}", "missing")
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ModelParseError(f"{where}.{key}", "expected a number")
    return float(value)


def _inertia_from_upper(values, where: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (6,):
        raise ModelParseError(where, "expected 6 values [Ixx, Ixy, Ixz, Iyy, Iyz, Izz]")
    ixx, ixy, ixz, iyy, iyz, izz = arr
    return np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])


def _index(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ModelParseError(where, "expected an integer index")
    return value


def parse_model(doc: dict) -> RobotModel:
    """Build a model from a parsed JSON document and validate it."""
    if not isinstance(doc, dict):
        raise ModelParseError("<root>", "expected an object")
    for key in ("links", "joints"):
        if key not in doc:
            raise ModelParseError(key, "missing")
        if not isinstance(doc[key], list):
            raise ModelParseError(key, "expected an array")

    links = []
    for i, item in enumerate(doc["links"]):
        where = f"links[{i}]"
        if not isinstance(item, dict):
            raise ModelParseError(where, "expected an object")
        capsule = None
        if item.get("capsule") is not None:
            cap = item["capsule"]
            capsule = Capsule(_vec3(cap.get("a"), f"{where}.capsule.a"),
                              _vec3(cap.get("b"), f"{where}.capsule.b"),
                              _number(cap, "radius", f"{where}.capsule"))
        links.append(Link(
            name=str(item.get("name", f"link{i}")),
            mass=_number(item, "mass", where),
            com_offset=_vec3(item.get("com_offset", [0, 0, 0]), f"{where}.com_offset"),
            inertia=_inertia_from_upper(item.get("inertia", [0] * 6), f"{where}.inertia"),
            capsule=capsule,
        ))

    joints = []
    for i, item in enumerate(doc["joints"]):
        where = f"joints[{i}]"
        if not isinstance(item, dict):
            raise ModelParseError(where, "expected an object")
        kind = item.get("kind")
        if kind not in (FLOATING, REVOLUTE):
            raise ModelParseError(f"{where}.kind", f"expected '{FLOATING}' or '{REVOLUTE}'")
        if "parent" not in item:
            raise ModelParseError(f"{where}.parent", "missing")
        axis = None
        if kind == REVOLUTE:
            axis = _vec3(item.get("axis"), f"{where}.axis")
        inf = np.inf
        joints.append(Joint(
            name=str(item.get("name", f"joint{i}")),
            kind=kind,
            parent=_index(item["parent"], f"{where}.parent"),
            origin=_vec3(item.get("origin", [0, 0, 0]), f"{where}.origin"),
            axis=axis,
            q_min=_number(item, "q_min", where, -inf), q_max=_number(item, "q_max", where, inf),
            v_min=_number(item, "v_min", where, -inf), v_max=_number(item, "v_max", where, inf),
            tau_min=_number(item, "tau_min", where, -inf), tau_max=_number(item, "tau_max", where, inf),
        ))

    def markers(key: str) -> list[Marker]:
        out = []
        for i, item in enumerate(doc.get(key, [])):
            where = f"{key}[{i}]"
            if not isinstance(item, dict) or "link" not in item:
                raise ModelParseError(f"{where}.link", "missing")
            out.append(Marker(str(item.get("name", f"{key}{i}")),
                              _index(item["link"], f"{where}.link"),
                              _vec3(item.get("offset", [0, 0, 0]), f"{where}.offset")))
        return out

    pairs = []
    for i, pair in enumerate(doc.get("collision_pairs", [])):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ModelParseError(f"collision_pairs[{i}]", "expected a pair of link indices")
        pairs.append((_index(pair[0], f"collision_pairs[{i}][0]"),
                      _index(pair[1], f"collision_pairs[{i}][1]")))

    model = RobotModel(
        name=str(doc.get("name", "robot")),
        links=links,
        joints=joints,
        contact_points=markers("contact_points"),
        keypoints=markers("keypoints"),
        collision_pairs=pairs,
        tags=dict(doc.get("tags", {})),
    )
    if "total_mass" in doc:
        declared = _number(doc, "total_mass", "<root>")
        if abs(declared - model.total_mass) > 1e-9 * max(1.0, abs(declared)):
            raise ModelValidationError(
                "total_mass", f"declared {declared} but links sum to {model.total_mass}")
    validate_model(model)
    return model


def validate_model(model: RobotModel) -> RobotModel:
    """Check every structural invariant, raising :class:`ModelValidationError`."""
    links, joints = model.links, model.joints
    if not links:
        raise ModelValidationError("links", "model has no links")
    if len(joints) != len(links):
        raise ModelValidationError(
            "joint-link pairing", f"{len(joints)} joints for {len(links)} links")
    if joints[0].kind != FLOATING or joints[0].parent != -1:
        raise ModelValidationError("root", "joint 0 must be the floating base with parent -1")
    for i, j in enumerate(joints[1:], start=1):
        if j.kind != REVOLUTE:
            raise ModelValidationError("root", f"joint {i} ({j.name}) is a second floating base")
        if not 0 <= j.parent < len(joints):
            raise ModelValidationError("parent", f"joint {i} has parent {j.parent} out of range")
    # cycle check: every parent chain must reach the root
    for i in range(len(joints)):
        seen, k = set(), i
        while k != -1:
            if k in seen:
                raise ModelValidationError("cycle", f"joint {i} parent chain revisits joint {k}")
            seen.add(k)
            k = joints[k].parent

    for i, j in enumerate(joints[1:], start=1):
        if not np.all(np.isfinite(j.origin)):
            raise ModelValidationError("origin", f"joint {i} origin is not finite")
        if abs(np.linalg.norm(j.axis) - 1.0) > 1e-12:
            raise ModelValidationError("axis", f"joint {i} ({j.name}) axis is not unit norm")
        for lo, hi in (("q_min", "q_max"), ("v_min", "v_max"), ("tau_min", "tau_max")):
            if not getattr(j, lo) <= getattr(j, hi):
                raise ModelValidationError("limits", f"joint {i} ({j.name}) has {lo} > {hi}")

    for i, link in enumerate(links):
        if not np.isfinite(link.mass) or link.mass < 0:
            raise ModelValidationError("mass", f"link {i} mass must be non-negative")
        inertia = link.inertia
        if np.max(np.abs(inertia - inertia.T)) > 1e-12:
            raise ModelValidationError("inertia", f"link {i} inertia is not symmetric")
        if np.min(np.linalg.eigvalsh(inertia)) < -1e-12:
            raise ModelValidationError("inertia", f"link {i} inertia is not positive semidefinite")
        if link.capsule is not None and not link.capsule.radius > 0:
            raise ModelValidationError("capsule", f"link {i} capsule radius must be positive")

    for kind, items in (("contact point", model.contact_points), ("keypoint", model.keypoints)):
        for m in items:
            if not 0 <= m.link < len(links):
                raise ModelValidationError("marker link", f"{kind} {m.name} references link {m.link}")

    for a, b in model.collision_pairs:
        if a == b:
            raise ModelValidationError("collision pair", f"pair ({a}, {b}) repeats a link")
        for k in (a, b):
            if not 0 <= k < len(links):
                raise ModelValidationError("collision pair", f"link {k} does not exist")
            if links[k].capsule is None:
                raise ModelValidationError("collision pair", f"link {k} has no capsule")
    return model


def _num(x: float):
    return None if not np.isfinite(x) else float(x)


def serialize_model(model: RobotModel) -> dict:
    """Inverse of :func:`parse_model`; infinite limits are omitted."""
    links = []
    for link in model.links:
        I = link.inertia
        item = {
            "name": link.name,
            "mass": float(link.mass),
            "com_offset": [float(x) for x in link.com_offset],
            "inertia": [float(I[0, 0]), float(I[0, 1]), float(I[0, 2]),
                        float(I[1, 1]), float(I[1, 2]), float(I[2, 2])],
        }
        if link.capsule is not None:
            item["capsule"] = {"a": [float(x) for x in link.capsule.a],
                               "b": [float(x) for x in link.capsule.b],
                               "radius": float(link.capsule.radius)}
        links.append(item)
    joints = []
    for j in model.joints:
        item = {"name": j.name, "kind": j.kind, "parent": int(j.parent),
                "origin": [float(x) for x in j.origin]}
        if j.axis is not None:
            item["axis"] = [float(x) for x in j.axis]
        for key in ("q_min", "q_max", "v_min", "v_max", "tau_min", "tau_max"):
            value = _num(getattr(j, key))
            if value is not None:
                item[key] = value
        joints.append(item)

    def markers(items):
        return [{"name": m.name, "link": int(m.link), "offset": [float(x) for x in m.offset]}
                for m in items]

    return {
        "name": model.name,
        "links": links,
        "joints": joints,
        "contact_points": markers(model.contact_points),
        "keypoints": markers(model.keypoints),
        "collision_pairs": [[int(a), int(b)] for a, b in model.collision_pairs],
        "tags": model.tags,
    }


def load_model(document) -> RobotModel:
    """Load a model from a JSON string, a path, or an already-parsed dict."""
    if isinstance(document, dict):
        return parse_model(document)
    if isinstance(document, Path) or (isinstance(document, str)
                                      and not document.lstrip().startswith("{")):
        text = Path(document).read_text()
    else:
        text = document
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError("<document>", f"invalid JSON ({exc})") from None
    return parse_model(doc)


def dump_model(model: RobotModel) -> str:
    return json.dumps(serialize_model(model), indent=1)


def shipped_model(name: str) -> RobotModel:
    """Load one of the models bundled with the package (``prestoe``, ``kick_leg``)."""
    text = resources.files("kinokick.data").joinpath(f"{name}.json").read_text()
    return load_model(text)
