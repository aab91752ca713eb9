"""Synthetic reference clips generated from a robot model.

No human capture ships with the package, so demos and tests use clips
produced by driving the robot's own kinematics through a scripted instep
kick (or a static stance), reading off the keypoints, and scaling the
result to human size.  Rescaling such a clip back onto the robot recovers
the robot-scale keypoints exactly, which makes downstream errors easy to
attribute.

The support foot stays flat on the ground: the pelvis pose is solved from
the support-leg joint angles so that the left foot never moves.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq, least_squares
from scipy.spatial.transform import Rotation

from .kinodyn import center_of_mass, forward_kinematics, marker_positions
from .mocap import MocapClip
from .model import RobotModel
from .rotations import quat_log, quat_multiply, quat_conjugate

HUMAN_NAMES = {
    "pelvis": "Hips", "head": "Head",
    "hip": "UpLeg", "knee": "Leg", "ankle": "Foot", "ball": "ToeBase",
    "toe_tip": "ToeEnd", "heel": "Heel",
    "shoulder": "Arm", "elbow": "ForeArm", "wrist": "Hand",
}
HUMAN_SCALE = 1.75 / 1.3
FOOT_MARKERS = ("heel", "ball", "toe_tip")

# default kick clip: 2 s of capture at 120 Hz trimmed so that resampling to
# 30 Hz gives 60 knots
KICK_FRAMES_120HZ = 237
SUPPORT_KNEE = 0.6
LEAN_BACK = 0.2
STANCE_WIDTH = 0.2


def _matrix_to_quat(R):
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


def human_name(robot_name: str) -> str:
    side, _, part = robot_name.partition("_")
    if side in ("l", "r") and part in HUMAN_NAMES:
        return ("Left" if side == "l" else "Right") + HUMAN_NAMES[part]
    return HUMAN_NAMES.get(robot_name, robot_name)


def keypoint_parents(model: RobotModel) -> list[int]:
    """Skeleton tree over the keypoints: a keypoint hangs from the previous
    keypoint on its own link, else from the first keypoint on the nearest
    ancestor link that carries one."""
    first_on_link: dict[int, int] = {}
    parents = []
    for i, kp in enumerate(model.keypoints):
        if kp.link in first_on_link:
            same = [j for j in range(i) if model.keypoints[j].link == kp.link]
            parents.append(same[-1])
            continue
        above = [0] + model.ancestors[kp.link][:-1] if kp.link else []
        parent = -1
        for link in reversed(above):
            if link in first_on_link:
                parent = first_on_link[link]
                break
        first_on_link[kp.link] = i
        parents.append(parent)
    if parents.count(-1) != 1:
        raise ValueError("keypoints do not form a single tree")
    return parents


def clip_from_configurations(model: RobotModel, qs, rate: float,
                             scale: float = HUMAN_SCALE) -> MocapClip:
    """Keypoint positions of ``qs`` scaled by ``scale`` and renamed to
    human-skeleton joint names, with the correspondence back to the robot."""
    pts = marker_positions(model, model.keypoints, np.asarray(qs)) * scale
    robot_names = [k.name for k in model.keypoints]
    names = [human_name(n) for n in robot_names]
    parents = keypoint_parents(model)
    rest = marker_positions(model, model.keypoints, model.neutral_configuration()) * scale
    offsets = rest.copy()
    for j, p in enumerate(parents):
        if p >= 0:
            offsets[j] = rest[j] - rest[p]
    feet = {}
    for side, prefix in (("left", "l_"), ("right", "r_")):
        feet[side] = [human_name(n) for n in robot_names
                      if n.startswith(prefix) and n[2:] in FOOT_MARKERS]
    return MocapClip(rate=float(rate), frames=pts, names=names, parents=parents,
                     offsets=offsets, correspondence=dict(zip(names, robot_names)),
                     feet=feet)


# ---------------------------------------------------------------------------
# posing helpers
# ---------------------------------------------------------------------------

def _set(model, q, values: dict):
    for name, value in values.items():
        try:
            q[..., 7 + model.joint_index(name)] = value
        except KeyError:
            pass
    return q


def _place_on_support(model, q, foot_link, foot_xy):
    """Move the floating base so that ``foot_link`` is flat with its sole at
    z = 0 and its origin over ``foot_xy``; returns the updated q."""
    q = np.array(q, dtype=float)
    base = q.copy()
    base[..., :7] = model.neutral_configuration()[:7]
    poses = forward_kinematics(model, base)
    R_f, p_f = poses.R[..., foot_link, :, :], poses.p[..., foot_link, :]
    sole = _sole_height(model, foot_link)
    target = np.array([foot_xy[0], foot_xy[1], -sole])
    R_base = np.swapaxes(R_f, -1, -2)
    q[..., :3] = target - np.einsum("...ij,...j->...i", R_base, p_f)
    q[..., 3:7] = np.array([_matrix_to_quat(R) for R in R_base.reshape(-1, 3, 3)]).reshape(
        R_base.shape[:-2] + (4,))
    return q


def _sole_height(model, link):
    zs = [c.offset[2] for c in model.contact_points if c.link == link]
    return min(zs) if zs else 0.0


def _foot_pose_error(model, q, link, R_goal, p_goal):
    poses = forward_kinematics(model, q)
    R, p = poses.R[link], poses.p[link]
    dq = quat_multiply(quat_conjugate(_matrix_to_quat(R_goal)), _matrix_to_quat(R))
    return np.concatenate([p - p_goal, 0.3 * quat_log(dq)])


def _lean_for_balance(model, q, support_link, support_xy, roll_joint):
    """Support ankle roll that puts the CoM over the middle of the support foot."""
    pts = [i for i, c in enumerate(model.contact_points) if c.link == support_link]

    def offset(angle):
        trial = _place_on_support(model, _set(model, q.copy(), {roll_joint: angle}),
                                  support_link, support_xy)
        centre = marker_positions(model, [model.contact_points[i] for i in pts], trial).mean(0)
        return center_of_mass(model, trial)[1] - centre[1]

    return brentq(offset, -0.45, 0.45, xtol=1e-12)


def _stance_leg(model, q, link, p_goal, joints):
    idx = [7 + model.joint_index(n) for n in joints]

    def residual(x):
        trial = q.copy()
        trial[idx] = x
        return _foot_pose_error(model, trial, link, np.eye(3), p_goal)

    lo, hi = (b[np.array(idx) - 7] for b in model.position_limits)
    sol = least_squares(residual, np.clip(np.zeros(len(idx)), lo, hi), bounds=(lo, hi),
                        xtol=1e-14, ftol=1e-14, gtol=1e-14)
    out = q.copy()
    out[idx] = sol.x
    return out


# ---------------------------------------------------------------------------
# scripted motions
# ---------------------------------------------------------------------------

def standing_configurations(model: RobotModel, n_frames: int, knee: float = SUPPORT_KNEE,
                            stance_width: float = STANCE_WIDTH):
    """Static double-support stance repeated ``n_frames`` times."""
    q = _stance(model, knee, stance_width, balance=False)
    return np.repeat(q[None], n_frames, axis=0)


def _stance(model, knee, stance_width, lean_back=LEAN_BACK, balance=True):
    """Left foot flat at the origin, right foot flat ``stance_width`` to the
    right.  ``lean_back`` pitches the pelvis back so that a bent support knee
    lowers the hips without pushing them ahead of the foot."""
    left_foot = model.link_index("l_foot")
    right_foot = model.link_index("r_foot")
    q = _set(model, model.neutral_configuration(),
             {"l_knee": knee, "l_ankle_pitch": -knee + lean_back})
    if balance:
        angle = _lean_for_balance(model, q, left_foot, (0.0, 0.0), "l_ankle_roll")
        _set(model, q, {"l_ankle_roll": angle})
    q = _place_on_support(model, q, left_foot, (0.0, 0.0))
    goal = np.array([0.0, -stance_width, -_sole_height(model, right_foot)])
    right = ["r_hip_yaw", "r_hip_roll", "r_hip_pitch", "r_knee", "r_ankle_pitch", "r_ankle_roll"]
    return _stance_leg(model, q, right_foot, goal, right)


def _profile(times, values):
    return PchipInterpolator(np.asarray(times, float), np.asarray(values, float))


# joint offsets from the stance pose: (knot times in s, values in rad)
KICK_SCRIPT = {
    "r_hip_pitch": ([0, 0.55, 0.95, 1.3, 1.6, 3.0], [0, 0, 0.4, -0.75, -0.9, -0.9]),
    "r_knee": ([0, 0.5, 0.7, 1.0, 1.3, 1.6, 3.0], [0, 0, 0.7, 1.45, 0.9, 0.9, 0.9]),
    "r_ankle_pitch": ([0, 0.5, 0.7, 0.95, 1.05, 1.45, 1.75, 3.0],
                      [0, 0, -0.5, 0.24, 0.3, 0.3, 0.15, 0.15]),
    "r_hip_roll": ([0, 0.5, 1.0, 1.6, 3.0], [0, 0, -0.08, -0.05, -0.05]),
    "l_knee": ([0, 0.6, 1.25, 3.0], [0, 0, 0.15, 0.15]),
}


def kick_configurations(model: RobotModel, rate: float = 120.0,
                        n_frames: int = KICK_FRAMES_120HZ, knee: float = SUPPORT_KNEE,
                        stance_width: float = STANCE_WIDTH, script: dict | None = None):
    """Scripted right-footed instep kick on a planted left foot.

    Phases: quiet stance with the CoM already over the support foot until
    0.5 s, backswing (hip extension with knee flexion), forward swing with
    the hip leading the knee, ankle held plantar-flexed through contact
    around 1.17 s, and follow-through with the leg still in the air.  The
    pelvis drifts forward through support-knee flexion early in the swing,
    which starts the proximal-to-distal velocity sequence.
    """
    script = KICK_SCRIPT if script is None else script
    stance = _stance(model, knee, stance_width)
    t = np.arange(n_frames) / rate
    qs = np.repeat(stance[None], n_frames, axis=0)
    for name, (times, values) in script.items():
        offset = _profile(times, values)(t)
        _set(model, qs, {name: stance[7 + model.joint_index(name)] + offset})
        if name == "l_knee":
            # keep the pelvis pitch fixed: the ankle follows the knee
            ankle = stance[7 + model.joint_index("l_ankle_pitch")]
            _set(model, qs, {"l_ankle_pitch": ankle - offset})
    return _place_on_support(model, qs, model.link_index("l_foot"), (0.0, 0.0))


def kick_clip(model: RobotModel, rate: float = 120.0, n_frames: int = KICK_FRAMES_120HZ,
              scale: float = HUMAN_SCALE) -> MocapClip:
    return clip_from_configurations(model, kick_configurations(model, rate, n_frames), rate, scale)


def standing_clip(model: RobotModel, rate: float = 30.0, n_frames: int = 10,
                  scale: float = HUMAN_SCALE) -> MocapClip:
    return clip_from_configurations(model, standing_configurations(model, n_frames), rate, scale)


def default_ball(model: RobotModel, q0) -> np.ndarray:
    """Ball placed ahead and to the kicking side of the initial pelvis, at
    about 31 degrees from the forward axis."""
    return np.asarray(q0)[:2] + np.array([0.25, -0.15])
