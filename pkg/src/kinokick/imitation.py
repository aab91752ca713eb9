"""Imitation rewards, PD actuation, policy observations and reference-guided
early termination.

Everything here is a pure function of its arguments so rollout workers can
call it concurrently.  States are ``(q, v)`` pairs in the model's
configuration / tangent layout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .kinodyn import center_of_mass, difference_configuration, forward_kinematics, marker_positions
from .model import RobotModel

# seconds ahead of the current time at which reference states are observed
LOOKAHEAD = (0.02, 0.68, 1.34)


@dataclass(frozen=True)
class RewardWeights:
    """Weights ``w_*`` (>= 0) and exponential scales ``k_*`` (< 0)."""

    w_k: float = 0.25
    w_q: float = 0.25
    w_v: float = 0.1
    w_c: float = 0.25
    w_ball: float = 1.0
    k_k: float = -2.0
    k_q: float = -2.0
    k_v: float = -2.0
    k_c: float = -2.0

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not np.isfinite(val):
                raise ValueError(f"{f.name} must be finite")
            if f.name.startswith("w_") and val < 0:
                raise ValueError(f"weight {f.name} must be non-negative, got {val}")
            if f.name.startswith("k_") and val >= 0:
                raise ValueError(f"scale {f.name} must be negative so rewards decay with error, got {val}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RewardWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown reward weight(s) {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in doc.items()})


@dataclass(frozen=True)
class RetSchedule:
    """Staircase threshold: ``d_max`` until ``t_start``, then ``n`` smoothed
    stairs down to ``d_min`` reached at ``t_end``.  ``gamma`` sets how sharp
    each stair is."""

    d_max: float = 0.30
    d_min: float = 0.10
    t_start: float = 5.0e7
    t_end: float = 1.0e9
    n: int = 4
    gamma: float = 10.0

    def __post_init__(self):
        if not self.d_max > self.d_min > 0:
            raise ValueError("need d_max > d_min > 0")
        if not self.t_end > self.t_start:
            raise ValueError("need t_end > t_start")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("stair count n must be a positive integer")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def stair_height(self) -> float:
        return (self.d_max - self.d_min) / self.n

    @property
    def stair_length(self) -> float:
        return (self.t_end - self.t_start) / self.n

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RetSchedule":
        doc = dict(doc)
        if "n" in doc:
            doc["n"] = int(doc["n"])
        return cls(**doc)


@dataclass(frozen=True)
class ImitationReward:
    keypoint: float
    joint: float
    com: float

    @property
    def total(self) -> float:
        return self.keypoint + self.joint + self.com

    def to_dict(self) -> dict:
        return {"keypoint": self.keypoint, "joint": self.joint, "com": self.com, "total": self.total}


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------

def tracking_errors(model: RobotModel, state, reference) -> dict:
    """Error norms entering the imitation reward.

    ``keypoint`` sums the per-keypoint distances; ``joint`` is the norm of the
    configuration difference (tangent, so the base orientation enters through
    its rotation vector); ``velocity`` and ``com`` are Euclidean norms.
    """
    q, v = (np.asarray(a, dtype=float) for a in state)
    q_ref, v_ref = (np.asarray(a, dtype=float) for a in reference)
    poses, poses_ref = forward_kinematics(model, q), forward_kinematics(model, q_ref)
    kp = marker_positions(model, model.keypoints, poses=poses)
    kp_ref = marker_positions(model, model.keypoints, poses=poses_ref)
    return {
        "keypoint": float(np.linalg.norm(kp_ref - kp, axis=-1).sum()),
        "joint": float(np.linalg.norm(difference_configuration(q, q_ref))),
        "velocity": float(np.linalg.norm(v_ref - v)),
        "com": float(np.linalg.norm(center_of_mass(model, poses=poses_ref) - center_of_mass(model, poses=poses))),
    }


def reward_from_errors(errors: dict, weights: RewardWeights = RewardWeights()) -> ImitationReward:
    w = weights
    return ImitationReward(
        keypoint=w.w_k * np.exp(w.k_k * errors["keypoint"]),
        joint=w.w_q * np.exp(w.k_q * errors["joint"]) + w.w_v * np.exp(w.k_v * errors["velocity"]),
        com=w.w_c * np.exp(w.k_c * errors["com"]),
    )


def reward_imitation(state, reference, model: RobotModel,
                     weights: RewardWeights = RewardWeights()) -> ImitationReward:
    """Keypoint, joint and CoM tracking rewards of ``state = (q, v)`` against
    the reference frame ``(q_ref, v_ref)``."""
    return reward_from_errors(tracking_errors(model, state, reference), weights)


def reward_ball(v_ball, n_target, w_ball: float = 1.0) -> float:
    """``w_ball (exp(max(0, v . n)) - 1)``; only progress along ``n`` pays."""
    n = np.asarray(n_target, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise ValueError("target direction must be a unit vector")
    speed = float(np.dot(np.asarray(v_ball, dtype=float), n))
    return w_ball * np.expm1(max(0.0, speed))


# ---------------------------------------------------------------------------
# actuation / observation
# ---------------------------------------------------------------------------

def pd_torque(q_des, q, v, k_p, k_d, model: RobotModel | None = None, limits=None) -> np.ndarray:
    """Joint torques ``k_p (q_des - q) - k_d v`` clamped to the torque limits.

    All vectors are joint-space.  Gains may be scalars or per-joint vectors.
    ``limits`` is a ``(lo, hi)`` pair; by default the model's torque limits.
    """
    q_des, q, v = (np.asarray(a, dtype=float) for a in (q_des, q, v))
    n = q.shape[-1]
    if q_des.shape[-1] != n or v.shape[-1] != n:
        raise ValueError("q_des, q and v must have the same length")
    k_p, k_d = np.asarray(k_p, dtype=float), np.asarray(k_d, dtype=float)
    for name, k in (("k_p", k_p), ("k_d", k_d)):
        if k.ndim > 1 or (k.ndim == 1 and k.size != n):
            raise ValueError(f"{name} has length {k.size}, expected {n}")
    tau = k_p * (q_des - q) - k_d * v
    if limits is None and model is not None:
        limits = model.torque_limits
    if limits is not None:
        lo, hi = limits
        if np.size(lo) not in (1, n) or np.size(hi) not in (1, n):
            raise ValueError("torque limits do not match the joint count")
        tau = np.clip(tau, lo, hi)
    return tau


def lookahead_indices(t: float, rate: float, n_frames: int, offsets=LOOKAHEAD) -> np.ndarray:
    """Reference frames observed at time ``t``: nearest frame (halves round
    up) to each ``t + offset``, clamped to the clip."""
    if t < 0:
        raise ValueError("time must be non-negative")
    idx = np.floor((t + np.asarray(offsets, dtype=float)) * rate + 0.5).astype(int)
    return np.clip(idx, 0, n_frames - 1)


def assemble_observation(reference, t: float, state, previous_action, rate: float,
                         offsets=LOOKAHEAD) -> np.ndarray:
    """Policy observation vector.

    Layout: ``[q_ref(t+o1), v_ref(t+o1), ..., q_ref(t+o3), v_ref(t+o3), q, v,
    previous_action]`` with ``reference = (q_ref (F, nq), v_ref (F, nv))``
    sampled at ``rate`` Hz, so the length is ``4 (nq + nv) + n_joints``.
    """
    q_ref, v_ref = (np.atleast_2d(np.asarray(a, dtype=float)) for a in reference)
    if len(q_ref) != len(v_ref):
        raise ValueError("reference positions and velocities differ in length")
    idx = lookahead_indices(t, rate, len(q_ref), offsets)
    q, v = (np.asarray(a, dtype=float).ravel() for a in state)
    parts = [np.concatenate([q_ref[i], v_ref[i]]) for i in idx]
    parts += [q, v, np.asarray(previous_action, dtype=float).ravel()]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# early termination
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def ret_threshold(t, schedule: RetSchedule = RetSchedule()):
    """Termination distance (m) after ``t`` training steps.

    Between ``t_start`` and ``t_end`` this is ``d_max`` minus ``n`` logistic
    stairs of height ``(d_max - d_min) / n`` centred at
    ``t_start + i (t_end - t_start) / n``, ``i = 1..n``.
    """
    s = schedule
    t_arr = np.asarray(t, dtype=float)
    i = np.arange(1, s.n + 1)
    dt = s.stair_length
    x = s.gamma * (t_arr[..., None] - (s.t_start + i * dt)) / dt
    mid = s.d_max - s.stair_height * _sigmoid(x).sum(axis=-1)
    out = np.where(t_arr < s.t_start, s.d_max, np.where(t_arr >= s.t_end, s.d_min, mid))
    return float(out) if out.ndim == 0 else out


def default_termination_links(model: RobotModel) -> list[int]:
    """Links carrying at least one keypoint, in link order."""
    return sorted({k.link for k in model.keypoints})


def max_link_deviation(q, q_ref, model: RobotModel, links=None) -> float:
    links = default_termination_links(model) if links is None else list(links)
    if not links:
        raise ValueError("termination link set is empty")
    p = forward_kinematics(model, q).p[..., links, :]
    p_ref = forward_kinematics(model, q_ref).p[..., links, :]
    return float(np.max(np.linalg.norm(p - p_ref, axis=-1)))


def should_terminate(q, q_ref, model: RobotModel, threshold: float, links=None) -> bool:
    """True when some link origin in ``links`` is farther than ``threshold``
    from its reference position."""
    return max_link_deviation(q, q_ref, model, links) > threshold


def config_from_dict(doc: dict) -> tuple[RewardWeights, RetSchedule]:
    """Read ``{"weights": {...}, "ret_schedule": {...}}`` (both optional)."""
    return (RewardWeights.from_dict(doc.get("weights", {})),
            RetSchedule.from_dict(doc.get("ret_schedule", {})))
