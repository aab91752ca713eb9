"""Motion-capture clip handling: resampling, rescaling onto a robot, and
contact / kick-timing extraction.

A clip stores world positions of skeleton joints, ``frames[k, j]`` for frame
``k`` and joint ``j``, sampled uniformly at ``rate`` Hz.  Frame ``k`` is at
time ``k / rate`` so a clip of ``n`` frames lasts ``(n - 1) / rate`` seconds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .kinodyn import marker_positions
from .model import RobotModel


class MocapError(ValueError):
    """Invalid clip, missing correspondence, or undetectable kick phase."""


@dataclass(frozen=True, eq=False)
class MocapClip:
    """Uniformly sampled skeleton positions.

    Parameters
    ----------
    rate : float
        Sample rate in Hz.
    frames : ndarray, shape (F, J, 3)
        World joint positions in metres.
    names : list of str
        Joint names, one per column of ``frames``.
    parents : list of int
        Parent index of each joint, -1 for the root.
    offsets : ndarray, shape (J, 3)
        Rest-pose offset of each joint from its parent (root: absolute).
    correspondence : dict
        Map from mocap joint name to robot keypoint name.
    feet : dict
        ``{"left": [joint names], "right": [joint names]}`` used for contact
        detection.
    """

    rate: float
    frames: np.ndarray
    names: list[str]
    parents: list[int]
    offsets: np.ndarray | None = None
    correspondence: dict = field(default_factory=dict)
    feet: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise MocapError(f"frames must have shape (F, J, 3), got {frames.shape}")
        if not self.rate > 0:
            raise MocapError("rate must be positive")
        J = frames.shape[1]
        if len(self.names) != J or len(self.parents) != J:
            raise MocapError("names/parents do not match the joint count of the frames")
        for j, p in enumerate(self.parents):
            if not -1 <= p < J or p == j:
                raise MocapError(f"joint {self.names[j]} has invalid parent {p}")
        if sum(p == -1 for p in self.parents) != 1:
            raise MocapError("skeleton must have exactly one root")
        for name in self.correspondence:
            if name not in self.names:
                raise MocapError(f"correspondence source {name!r} is not a skeleton joint")
        for side, joints in self.feet.items():
            for name in joints:
                if name not in self.names:
                    raise MocapError(f"{side} foot joint {name!r} is not a skeleton joint")
        object.__setattr__(self, "frames", frames)
        if self.offsets is None:
            object.__setattr__(self, "offsets", _offsets_from_frame(frames[0], self.parents))
        else:
            object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float).reshape(J, 3))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) / self.rate

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.rate

    @property
    def root(self) -> int:
        return self.parents.index(-1)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise MocapError(f"unknown joint {name!r}") from None

    def rest_positions(self) -> np.ndarray:
        """Joint positions of the rest pose obtained by chaining offsets."""
        pos = np.zeros_like(self.offsets)
        for j in _topological(self.parents):
            p = self.parents[j]
            pos[j] = self.offsets[j] if p < 0 else pos[p] + self.offsets[j]
        return pos


def _offsets_from_frame(frame, parents):
    out = np.array(frame, dtype=float)
    for j, p in enumerate(parents):
        if p >= 0:
            out[j] = frame[j] - frame[p]
    return out


def _topological(parents) -> list[int]:
    order, placed = [], set()
    while len(order) < len(parents):
        progress = False
        for j, p in enumerate(parents):
            if j not in placed and (p < 0 or p in placed):
                order.append(j)
                placed.add(j)
                progress = True
        if not progress:
            raise MocapError("skeleton parents contain a cycle")
    return order


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def resample(clip: MocapClip, target_rate: float) -> MocapClip:
    """Linearly interpolate the clip at ``target_rate``.

    The output has ``floor(duration * target_rate) + 1`` frames, the first at
    time zero, so its duration is within one output sample of the input.
    """
    if not target_rate > 0:
        raise MocapError("target rate must be positive")
    if target_rate == clip.rate:
        return replace(clip, frames=clip.frames.copy())
    count = int(np.floor(clip.duration * target_rate + 1e-9)) + 1
    t = np.arange(count) / target_rate
    u = t * clip.rate
    lo = np.minimum(np.floor(u).astype(int), clip.n_frames - 1)
    hi = np.minimum(lo + 1, clip.n_frames - 1)
    w = (u - lo)[:, None, None]
    frames = (1.0 - w) * clip.frames[lo] + w * clip.frames[hi]
    return replace(clip, rate=float(target_rate), frames=frames)


# ---------------------------------------------------------------------------
# rescaling
# ---------------------------------------------------------------------------

def rescale_skeleton(clip: MocapClip, bone_lengths, root_scale: float) -> MocapClip:
    """Keep every bone's per-frame direction, set its length to
    ``bone_lengths[j]`` (bone from ``parents[j]`` to ``j``), and scale the root
    trajectory by ``root_scale``."""
    bone_lengths = np.asarray(bone_lengths, dtype=float)
    src = clip.frames
    out = np.empty_like(src)
    root = clip.root
    out[:, root] = root_scale * src[:, root]
    offsets = clip.offsets.copy()
    offsets[root] = root_scale * offsets[root]
    for j in _topological(clip.parents):
        p = clip.parents[j]
        if p < 0:
            continue
        bone = src[:, j] - src[:, p]
        norm = np.linalg.norm(bone, axis=-1, keepdims=True)
        if np.any(norm < 1e-12):
            raise MocapError(f"bone {clip.names[p]}->{clip.names[j]} has zero length")
        out[:, j] = out[:, p] + bone / norm * bone_lengths[j]
        rest = np.linalg.norm(clip.offsets[j])
        offsets[j] = clip.offsets[j] * (bone_lengths[j] / rest if rest > 0 else 0.0)
    return replace(clip, frames=out, offsets=offsets)


def robot_keypoint_positions(model: RobotModel, q=None) -> dict:
    q = model.neutral_configuration() if q is None else q
    pts = marker_positions(model, model.keypoints, q)
    return {k.name: pts[i] for i, k in enumerate(model.keypoints)}


def rescale_to_robot(clip: MocapClip, model: RobotModel) -> MocapClip:
    """Rescale the clip to the robot's proportions.

    Bone lengths are the distances between the corresponding robot keypoints
    at the neutral configuration.  The root trajectory is scaled by the ratio
    of the robot's to the human's standing height, each measured as the
    vertical extent of the corresponding points in the rest pose.
    """
    keypoints = robot_keypoint_positions(model)
    missing = [n for n in clip.names if n not in clip.correspondence]
    if missing:
        raise MocapError(f"no robot keypoint corresponds to mocap joint(s) {missing}")
    for name in clip.names:
        target = clip.correspondence[name]
        if target not in keypoints:
            raise MocapError(f"correspondence target {target!r} is not a robot keypoint")
    robot = np.array([keypoints[clip.correspondence[n]] for n in clip.names])
    lengths = np.zeros(len(clip.names))
    for j, p in enumerate(clip.parents):
        if p >= 0:
            lengths[j] = np.linalg.norm(robot[j] - robot[p])
    human = clip.rest_positions()
    human_height = np.ptp(human[:, 2])
    robot_height = np.ptp(robot[:, 2])
    if human_height <= 0:
        raise MocapError("rest pose has zero height")
    return rescale_skeleton(clip, lengths, robot_height / human_height)


def keypoint_trajectory(clip: MocapClip, model: RobotModel) -> np.ndarray:
    """Clip positions reordered to the model's keypoints, shape (F, K, 3).

    Keypoints without a mocap counterpart are filled with NaN.
    """
    out = np.full((clip.n_frames, len(model.keypoints), 3), np.nan)
    inverse = {v: k for k, v in clip.correspondence.items()}
    for i, kp in enumerate(model.keypoints):
        if kp.name in inverse:
            out[:, i] = clip.frames[:, clip.index(inverse[kp.name])]
    return out


# ---------------------------------------------------------------------------
# contact schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KickTimings:
    swing: float
    lock: float
    impact: float

    def as_dict(self) -> dict:
        return {"T_swing": self.swing, "T_lock": self.lock, "T_impact": self.impact}


@dataclass(frozen=True, eq=False)
class ContactSchedule:
    """Per-knot activity of every contact point plus kick timings.

    ``active`` has shape (knots, points).  ``timings`` is None for clips
    without a kick (e.g. standing), in which case no kick gating applies.
    """

    active: np.ndarray
    dt: float
    timings: KickTimings | None = None
    point_names: list[str] = field(default_factory=list)
    foot_active: np.ndarray | None = None

    def __post_init__(self):
        active = np.asarray(self.active, dtype=bool)
        if active.ndim != 2:
            raise MocapError("active must be a (knots, points) matrix")
        object.__setattr__(self, "active", active)
        if not self.dt > 0:
            raise MocapError("dt must be positive")
        if self.timings is not None:
            t = self.timings
            end = (active.shape[0] - 1) * self.dt
            if not 0 <= t.swing < t.lock < t.impact <= end + 1e-9:
                raise MocapError(
                    f"timings must satisfy 0 <= T_swing < T_lock < T_impact <= {end:g}, "
                    f"got {t.swing:g}, {t.lock:g}, {t.impact:g}")

    @property
    def n_knots(self) -> int:
        return self.active.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_knots) * self.dt

    def window(self, start: float, stop: float) -> np.ndarray:
        """Boolean mask of knots with ``start <= k dt <= stop`` (1e-9 slack)."""
        t = self.times
        return (t >= start - 1e-9) & (t <= stop + 1e-9)

    def swing_gate(self) -> np.ndarray:
        """zeta_k: 1 inside [T_swing, T_impact], else 0."""
        if self.timings is None:
            return np.zeros(self.n_knots)
        return self.window(self.timings.swing, self.timings.impact).astype(float)

    def lock_mask(self) -> np.ndarray:
        if self.timings is None:
            return np.zeros(self.n_knots, dtype=bool)
        return self.window(self.timings.lock, self.timings.impact)

    def to_dict(self) -> dict:
        out = {
            "dt": self.dt,
            "knot_times": [float(t) for t in self.times],
            "contact_points": list(self.point_names),
            "active": [[bool(a) for a in row] for row in self.active],
        }
        out.update(self.timings.as_dict() if self.timings else
                   {"T_swing": None, "T_lock": None, "T_impact": None})
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ContactSchedule":
        timings = None
        if doc.get("T_swing") is not None:
            timings = KickTimings(doc["T_swing"], doc["T_lock"], doc["T_impact"])
        return cls(np.array(doc["active"], dtype=bool), float(doc["dt"]), timings,
                   list(doc.get("contact_points", [])))


def contact_predicate(height, speed, height_threshold, speed_threshold):
    """A foot is in contact when it is both low and slow."""
    return (np.asarray(height) < height_threshold) & (np.asarray(speed) < speed_threshold)


def _runs(mask):
    """(value, start, stop) for each maximal run of equal values."""
    out, start = [], 0
    for k in range(1, len(mask) + 1):
        if k == len(mask) or mask[k] != mask[start]:
            out.append((bool(mask[start]), start, k))
            start = k
    return out


def debounce(mask, window: int) -> np.ndarray:
    """Drop contact runs shorter than ``window`` frames, then fill interior
    gaps shorter than ``window``."""
    mask = np.array(mask, dtype=bool)
    if window <= 1 or mask.size == 0:
        return mask
    for value, a, b in _runs(mask):
        if value and b - a < window:
            mask[a:b] = False
    for value, a, b in _runs(mask):
        if not value and 0 < a and b < len(mask) and b - a < window:
            mask[a:b] = True
    return mask


def _foot_signals(clip, joints):
    idx = [clip.index(n) for n in joints]
    pts = clip.frames[:, idx]                       # (F, m, 3)
    vel = np.gradient(pts, axis=0) * clip.rate if clip.n_frames > 1 else np.zeros_like(pts)
    height = pts[..., 2].min(axis=1)
    speed = np.linalg.norm(vel, axis=-1).max(axis=1)
    forward = vel[..., 0].mean(axis=1)
    return height, speed, forward


def detect_contacts(clip: MocapClip, height_threshold: float = 0.02,
                    speed_threshold: float = 0.05, *, model: RobotModel | None = None,
                    feet: dict | None = None, kicking_side: str | None = None,
                    debounce_frames: int = 3, lock_lead: float = 0.1,
                    require_swing: bool = True) -> ContactSchedule:
    """Contact schedule and kick timings from foot height and speed.

    A foot is in contact at frame ``k`` iff its lowest marker is less than
    ``height_threshold`` above the ground plane and its fastest marker moves
    slower than ``speed_threshold``.  The ground plane is the 5th percentile
    of foot heights over the clip.  ``T_impact`` is the frame of peak forward
    (+x) speed of the kicking foot, ``T_swing`` the first airborne frame of
    its last lift-off before impact and ``T_lock = T_impact - lock_lead``.

    With ``model`` the per-foot activity is expanded to the model's contact
    points using ``model.tags["feet"]``; otherwise one column per foot.
    """
    if not (height_threshold > 0 and speed_threshold > 0):
        raise MocapError("thresholds must be positive")
    feet = feet or clip.feet
    if not feet:
        raise MocapError("clip does not name its foot joints")
    sides = sorted(feet)
    signals = {s: _foot_signals(clip, feet[s]) for s in sides}
    ground = np.percentile(np.concatenate([signals[s][0] for s in sides]), 5)
    foot_active = np.stack([
        debounce(contact_predicate(signals[s][0] - ground, signals[s][1],
                                   height_threshold, speed_threshold), debounce_frames)
        for s in sides], axis=1)
    if not foot_active.any():
        raise MocapError("no contact frames found")

    if kicking_side is None:
        kicking_side = (model.tags.get("kicking_side") if model is not None else None) or "right"
    timings = None
    if require_swing:
        if kicking_side not in feet:
            raise MocapError(f"no foot joints for kicking side {kicking_side!r}")
        kick = foot_active[:, sides.index(kicking_side)]
        forward = signals[kicking_side][2]
        impact = int(np.argmax(forward))
        liftoffs = [k for k in range(1, impact + 1) if kick[k - 1] and not kick[k]]
        if not liftoffs or forward[impact] <= 0:
            raise MocapError("clip too short to contain a swing of the kicking foot")
        swing = liftoffs[-1] / clip.rate
        t_impact = impact / clip.rate
        t_lock = t_impact - lock_lead
        if not swing < t_lock:
            raise MocapError(
                f"lock lead {lock_lead:g} s places T_lock before the swing starts")
        timings = KickTimings(swing, t_lock, t_impact)

    if model is not None:
        tag = model.tags.get("feet")
        if not tag:
            raise MocapError("model does not tag its per-foot contact points")
        active = np.zeros((clip.n_frames, model.n_contacts), dtype=bool)
        for col, side in enumerate(sides):
            for i in tag.get(side, []):
                active[:, i] = foot_active[:, col]
        names = [c.name for c in model.contact_points]
    else:
        active, names = foot_active, [f"{s}_foot" for s in sides]
    return ContactSchedule(active, 1.0 / clip.rate, timings, names, foot_active)


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def skeleton_document(clip: MocapClip) -> dict:
    return {
        "rate": clip.rate,
        "joints": [{"name": n, "parent": int(p), "offset": [float(x) for x in o]}
                   for n, p, o in zip(clip.names, clip.parents, clip.offsets)],
        "correspondence": dict(clip.correspondence),
        "feet": {k: list(v) for k, v in clip.feet.items()},
    }


def write_clip(clip: MocapClip, path) -> tuple[Path, Path]:
    """Write ``frame,joint,x,y,z`` rows to ``path`` and the skeleton to a
    sidecar JSON with the same stem."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint", "x", "y", "z"])
        for k in range(clip.n_frames):
            for j, name in enumerate(clip.names):
                w.writerow([k, name] + [repr(float(x)) for x in clip.frames[k, j]])
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(skeleton_document(clip), indent=1) + "\n")
    return path, sidecar


def read_clip(path, sidecar=None) -> MocapClip:
    """Read a CSV clip and its skeleton sidecar (default: same stem, .json)."""
    path = Path(path)
    if not path.exists():
        raise MocapError(f"clip file not found: {path}")
    sidecar = Path(sidecar) if sidecar else path.with_suffix(".json")
    if not sidecar.exists():
        raise MocapError(f"skeleton sidecar not found: {sidecar}")
    skel = json.loads(sidecar.read_text())
    names = [j["name"] for j in skel["joints"]]
    col = {n: i for i, n in enumerate(names)}
    rows = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                k, j = int(row["frame"]), col[row["joint"]]
                rows[k, j] = (float(row["x"]), float(row["y"]), float(row["z"]))
            except KeyError as exc:
                raise MocapError(f"{path}: unknown joint or column {exc}") from None
    n_frames = 1 + max(k for k, _ in rows) if rows else 0
    frames = np.full((n_frames, len(names), 3), np.nan)
    for (k, j), xyz in rows.items():
        frames[k, j] = xyz
    if np.isnan(frames).any():
        raise MocapError(f"{path}: every frame must list every joint")
    return MocapClip(
        rate=float(skel["rate"]), frames=frames, names=names,
        parents=[int(j["parent"]) for j in skel["joints"]],
        offsets=np.array([j.get("offset", [0, 0, 0]) for j in skel["joints"]], dtype=float),
        correspondence=dict(skel.get("correspondence", {})),
        feet={k: list(v) for k, v in skel.get("feet", {}).items()},
    )


def convert_clip(path, **skeleton) -> MocapClip:
    """Load a clip from another container.

    ``.csv`` goes through :func:`read_clip`.  ``.npz`` archives must hold
    ``positions`` (F, J, 3), ``names``, ``parents`` and ``rate``; extra
    skeleton fields may be passed as keywords.  Binary mocap formats (BVH,
    C3D, FBX) are not parsed; export them to joint positions first.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".csv":
        return read_clip(path)
    if suffix == ".npz":
        with np.load(path, allow_pickle=False) as data:
            return MocapClip(rate=float(data["rate"]), frames=data["positions"],
                             names=[str(n) for n in data["names"]],
                             parents=[int(p) for p in data["parents"]], **skeleton)
    raise MocapError(f"unsupported clip format {suffix!r}; export joint positions to CSV")
