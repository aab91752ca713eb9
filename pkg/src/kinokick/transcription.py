"""Direct transcription of the kicking trajectory problem.

The decision vector is knot-major: every knot stores the blocks
``q, v`` (kinematics-only stage) or ``q, v, r, rd, rdd, h, hd, c, f`` (full
stage).  ``q`` holds a unit quaternion, so the problem lives on a manifold:
derivatives are taken with respect to a tangent vector of size ``nv`` per
configuration and steps are applied with :meth:`NlpProblem.retract`.

Every cost term is a weighted least-squares residual ``rho`` with a sign,
contributing ``sign * ||rho||^2``.  Constraints are stacked into one
equality vector ``c(x) = 0`` and one inequality vector ``lo <= g(x) <= hi``.
Each constraint family is vectorized over knots and returns dense
per-row derivative blocks that are scattered into sparse Jacobians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .kinodyn import (
    GRAVITY,
    center_of_mass,
    centroidal_momentum_matrix,
    com_jacobian,
    difference_configuration,
    forward_kinematics,
    integrate_configuration,
    marker_positions,
    points_jacobian,
    segment_closest_parameters,
)
from .mocap import ContactSchedule, KickTimings
from .model import RobotModel
from .rotations import (
    left_jacobian_inv,
    quat_exp,
    quat_to_matrix,
    right_jacobian,
    right_jacobian_inv,
    skew,
)

FD_STEP = 1e-6


class TranscriptionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ground and problem specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlatGround:
    """Ground height map ``z = height`` with zero slope."""

    height: float = 0.0

    def __call__(self, xy):
        xy = np.asarray(xy, dtype=float)
        return np.full(xy.shape[:-1], self.height), np.zeros(xy.shape)


@dataclass
class CostWeights:
    Q_m: float = 10.0
    Q_i: float = 1.0
    Q_v: float = 1e-2
    Q_h: float = 1e-2
    Q_f: float = 1e-5

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("Q_m", "Q_i", "Q_v", "Q_h", "Q_f")}


@dataclass
class ProblemSpec:
    """Everything needed to transcribe one retargeting problem.

    ``reference`` holds robot-scale keypoint targets of shape (knots, K, 3),
    one frame per knot of ``schedule``.  ``torque_bounds`` overrides the
    model torque limits used by the contact-force torque proxy; the
    feasibility loop tightens it.
    """

    model: RobotModel
    reference: np.ndarray
    schedule: ContactSchedule
    ball_xy: np.ndarray | None = None
    target_direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    weights: CostWeights = field(default_factory=CostWeights)
    mu: float = 0.7
    theta_min: float = math.radians(24.0)
    theta_max: float = math.radians(43.0)
    ground: object = field(default_factory=FlatGround)
    lock_joints: list[str] | None = None
    torque_bounds: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=float)
        if self.ball_xy is not None:
            self.ball_xy = np.asarray(self.ball_xy, dtype=float)
        self.target_direction = np.asarray(self.target_direction, dtype=float)
        if self.lock_joints is None:
            self.lock_joints = list(self.model.tags.get("ankle_lock_joints", []))
        self.validate()

    @property
    def dt(self) -> float:
        return self.schedule.dt

    @property
    def n_knots(self) -> int:
        return self.schedule.n_knots

    def validate(self):
        w = self.weights.as_dict()
        bad = [k for k, val in w.items() if not val > 0]
        if bad:
            raise TranscriptionError(f"weights must be positive: {', '.join(bad)}")
        if not self.mu > 0:
            raise TranscriptionError("friction coefficient must be positive")
        if not self.theta_min < self.theta_max:
            raise TranscriptionError("theta_min must be below theta_max")
        if self.n_knots < 2:
            raise TranscriptionError("at least two knots are required")
        K = len(self.model.keypoints)
        if self.reference.shape != (self.n_knots, K, 3):
            raise TranscriptionError(
                f"reference has shape {self.reference.shape}, expected {(self.n_knots, K, 3)}")
        if self.schedule.active.shape[1] != self.model.n_contacts:
            raise TranscriptionError(
                f"schedule covers {self.schedule.active.shape[1]} contact points, "
                f"model has {self.model.n_contacts}")
        for name in self.lock_joints:
            self.model.joint_index(name)
        if self.torque_bounds is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in self.torque_bounds)
            if lo.shape != (self.model.n_joints,) or hi.shape != lo.shape:
                raise TranscriptionError("torque_bounds must hold one entry per joint")
            self.torque_bounds = (lo, hi)

    def proxy_bounds(self):
        return self.torque_bounds if self.torque_bounds is not None else self.model.torque_limits

    def to_config(self) -> dict:
        """Serializable settings (model, reference and schedule excluded)."""
        return {
            "weights": self.weights.as_dict(),
            "mu": float(self.mu),
            "theta_min_deg": math.degrees(self.theta_min),
            "theta_max_deg": math.degrees(self.theta_max),
            "ball_xy": None if self.ball_xy is None else [float(a) for a in self.ball_xy],
            "target_direction": [float(a) for a in self.target_direction],
            "ground_height": float(getattr(self.ground, "height", 0.0)),
            "lock_joints": list(self.lock_joints),
            "torque_bounds": None if self.torque_bounds is None else
            [[float(a) for a in b] for b in self.torque_bounds],
        }

    @classmethod
    def from_config(cls, doc: dict, model, reference, schedule) -> "ProblemSpec":
        known = {"weights", "mu", "theta_min_deg", "theta_max_deg", "ball_xy",
                 "target_direction", "ground_height", "lock_joints", "torque_bounds"}
        unknown = set(doc) - known
        if unknown:
            raise TranscriptionError(f"unknown problem settings: {sorted(unknown)}")
        weights = CostWeights(**{**CostWeights().as_dict(), **doc.get("weights", {})})
        kwargs = dict(model=model, reference=reference, schedule=schedule, weights=weights)
        if "mu" in doc:
            kwargs["mu"] = float(doc["mu"])
        if "theta_min_deg" in doc:
            kwargs["theta_min"] = math.radians(doc["theta_min_deg"])
        if "theta_max_deg" in doc:
            kwargs["theta_max"] = math.radians(doc["theta_max_deg"])
        if doc.get("ball_xy") is not None:
            kwargs["ball_xy"] = np.asarray(doc["ball_xy"], dtype=float)
        if "target_direction" in doc:
            kwargs["target_direction"] = np.asarray(doc["target_direction"], dtype=float)
        if "ground_height" in doc:
            kwargs["ground"] = FlatGround(float(doc["ground_height"]))
        if doc.get("lock_joints") is not None:
            kwargs["lock_joints"] = list(doc["lock_joints"])
        if doc.get("torque_bounds") is not None:
            kwargs["torque_bounds"] = tuple(np.asarray(b, float) for b in doc["torque_bounds"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# trajectory container and variable layout
# ---------------------------------------------------------------------------

CENTROIDAL = ("r", "rd", "rdd", "h", "hd")


@dataclass
class KinodynamicTrajectory:
    """Per-knot trajectory.  Centroidal fields are None for a kinematics-only
    trajectory.  ``c`` and ``f`` have shape (knots, contacts, 3)."""

    dt: float
    q: np.ndarray
    v: np.ndarray
    r: np.ndarray | None = None
    rd: np.ndarray | None = None
    rdd: np.ndarray | None = None
    h: np.ndarray | None = None
    hd: np.ndarray | None = None
    c: np.ndarray | None = None
    f: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if not self.dt > 0:
            raise TranscriptionError("dt must be positive")
        if self.q.ndim != 2 or self.q.shape[0] < 2:
            raise TranscriptionError("a trajectory needs at least two knots")
        if self.v.shape != (self.q.shape[0], self.q.shape[1] - 1):
            raise TranscriptionError("q and v dimensions disagree")

    @property
    def n_knots(self) -> int:
        return self.q.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_knots) * self.dt

    @property
    def has_centroidal(self) -> bool:
        return self.f is not None

    def check(self, model: RobotModel):
        N = self.n_knots
        if self.q.shape != (N, model.nq):
            raise TranscriptionError(f"q has shape {self.q.shape}, expected {(N, model.nq)}")
        if self.has_centroidal:
            for name in CENTROIDAL:
                if np.shape(getattr(self, name)) != (N, 3):
                    raise TranscriptionError(f"{name} must have shape {(N, 3)}")
            for name in ("c", "f"):
                if np.shape(getattr(self, name)) != (N, model.n_contacts, 3):
                    raise TranscriptionError(f"{name} must have shape {(N, model.n_contacts, 3)}")
        return self

    def kinematic(self) -> "KinodynamicTrajectory":
        return KinodynamicTrajectory(self.dt, self.q.copy(), self.v.copy())

    def to_dict(self) -> dict:
        out = {"dt": float(self.dt), "knots": []}
        for k in range(self.n_knots):
            rec = {"t": float(k * self.dt), "q": self.q[k].tolist(), "v": self.v[k].tolist()}
            if self.has_centroidal:
                for name in CENTROIDAL:
                    rec[name] = getattr(self, name)[k].tolist()
                rec["c"] = self.c[k].tolist()
                rec["f"] = self.f[k].tolist()
            out["knots"].append(rec)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "KinodynamicTrajectory":
        knots = doc["knots"]
        fields = {name: np.array([rec[name] for rec in knots], dtype=float)
                  for name in ("q", "v") + CENTROIDAL + ("c", "f") if name in knots[0]}
        return cls(float(doc["dt"]), **fields)


class Layout:
    """Offsets of each block inside a knot, in ambient (``x``) and tangent
    (``dx``) coordinates.  Only ``q`` differs: nq ambient, nv tangent."""

    def __init__(self, model: RobotModel, n_knots: int, stage: str):
        if stage not in ("kinematics", "full"):
            raise TranscriptionError(f"unknown stage {stage!r}")
        self.model, self.n_knots, self.stage = model, n_knots, stage
        nc3 = 3 * model.n_contacts
        sizes = {"q": model.nq, "v": model.nv}
        tsizes = {"q": model.nv, "v": model.nv}
        if stage == "full":
            for name in CENTROIDAL:
                sizes[name] = tsizes[name] = 3
            sizes["c"] = tsizes["c"] = nc3
            sizes["f"] = tsizes["f"] = nc3
        self.sizes, self.tsizes = sizes, tsizes
        self.offset, self.toffset = {}, {}
        a = t = 0
        for name in sizes:
            self.offset[name], self.toffset[name] = a, t
            a += sizes[name]
            t += tsizes[name]
        self.per_knot, self.per_knot_tangent = a, t

    @property
    def blocks(self) -> tuple[str, ...]:
        return tuple(self.sizes)

    @property
    def n_variables(self) -> int:
        return self.n_knots * self.per_knot

    @property
    def n_tangent(self) -> int:
        return self.n_knots * self.per_knot_tangent

    def unpack(self, x) -> dict:
        X = np.asarray(x, dtype=float).reshape(self.n_knots, self.per_knot)
        return {name: X[:, self.offset[name]:self.offset[name] + self.sizes[name]]
                for name in self.sizes}

    def pack(self, traj: KinodynamicTrajectory) -> np.ndarray:
        X = np.empty((self.n_knots, self.per_knot))
        for name in self.sizes:
            block = np.asarray(getattr(traj, name), dtype=float).reshape(self.n_knots, -1)
            X[:, self.offset[name]:self.offset[name] + self.sizes[name]] = block
        return X.ravel()

    def trajectory(self, x, dt: float) -> KinodynamicTrajectory:
        parts = {k: v.copy() for k, v in self.unpack(x).items()}
        nc = self.model.n_contacts
        for name in ("c", "f"):
            if name in parts:
                parts[name] = parts[name].reshape(self.n_knots, nc, 3)
        return KinodynamicTrajectory(dt, **parts)

    def columns(self, knots, block: str, cols=None) -> np.ndarray:
        """Tangent column indices, shape (len(knots), d)."""
        knots = np.asarray(knots, dtype=int)
        if cols is None:
            cols = np.arange(self.tsizes[block])
        cols = np.asarray(cols, dtype=int)
        base = knots * self.per_knot_tangent + self.toffset[block]
        if cols.ndim == 1:
            return base[:, None] + cols[None, :]
        return base[:, None] + cols

    def retract(self, x, dx) -> np.ndarray:
        X = np.array(x, dtype=float).reshape(self.n_knots, self.per_knot)
        D = np.asarray(dx, dtype=float).reshape(self.n_knots, self.per_knot_tangent)
        nq, nv = self.sizes["q"], self.tsizes["q"]
        X[:, :nq] = integrate_configuration(X[:, :nq], D[:, :nv])
        X[:, nq:] += D[:, nv:]
        return X.ravel()


# ---------------------------------------------------------------------------
# generic problem interface
# ---------------------------------------------------------------------------

@dataclass
class CostValue:
    name: str
    sign: float
    residual: np.ndarray
    jacobian: sp.csr_matrix | None

    @property
    def value(self) -> float:
        return float(self.sign * self.residual @ self.residual)


@dataclass
class Evaluation:
    terms: list[CostValue]
    eq: np.ndarray
    ineq: np.ndarray
    eq_jac: sp.csr_matrix | None = None
    ineq_jac: sp.csr_matrix | None = None

    @property
    def cost(self) -> float:
        return float(sum(t.value for t in self.terms))

    def cost_gradient(self) -> np.ndarray:
        n = self.eq_jac.shape[1]
        g = np.zeros(n)
        for t in self.terms:
            g += 2.0 * t.sign * (t.jacobian.T @ t.residual)
        return g


class NlpProblem:
    """Smooth NLP ``min sum sign*||rho||^2  s.t.  c(x) = 0, lo <= g(x) <= hi``.

    Subclasses implement :meth:`evaluate`.  ``eq_families`` and
    ``ineq_families`` map family names to row slices.
    """

    x0: np.ndarray
    n_tangent: int
    ineq_lo: np.ndarray
    ineq_hi: np.ndarray
    eq_families: dict
    ineq_families: dict

    @property
    def n_variables(self) -> int:
        return int(np.size(self.x0))

    @property
    def n_eq(self) -> int:
        return sum(s.stop - s.start for s in self.eq_families.values())

    @property
    def n_ineq(self) -> int:
        return sum(s.stop - s.start for s in self.ineq_families.values())

    def evaluate(self, x, derivatives: bool = True) -> Evaluation:
        raise NotImplementedError

    def retract(self, x, dx):
        return np.asarray(x, dtype=float) + dx

    def decode(self, x):
        return np.asarray(x, dtype=float).copy()

    def ineq_violation(self, g) -> np.ndarray:
        return np.maximum(self.ineq_lo - g, 0.0) + np.maximum(g - self.ineq_hi, 0.0)

    def family_summary(self, ev: Evaluation) -> dict:
        out = {}
        for name, s in self.eq_families.items():
            out[name] = float(np.max(np.abs(ev.eq[s]), initial=0.0))
        viol = self.ineq_violation(ev.ineq)
        for name, s in self.ineq_families.items():
            out[name] = float(np.max(viol[s], initial=0.0))
        return out


class FunctionProblem(NlpProblem):
    """NLP from plain callables on a Euclidean vector.

    ``costs`` is a list of ``(name, sign, fn)`` with ``fn(x) -> (rho, J)``;
    ``eq`` and ``ineq`` are ``fn(x) -> (values, J)`` or None.
    """

    def __init__(self, x0, costs=(), eq=None, ineq=None, lo=None, hi=None):
        self.x0 = np.asarray(x0, dtype=float)
        self.n_tangent = self.x0.size
        self._costs, self._eq, self._ineq = list(costs), eq, ineq
        n_eq = 0 if eq is None else len(eq(self.x0)[0])
        n_in = 0 if ineq is None else len(ineq(self.x0)[0])
        self.eq_families = {"equality": slice(0, n_eq)} if n_eq else {}
        self.ineq_families = {"inequality": slice(0, n_in)} if n_in else {}
        self.ineq_lo = np.full(n_in, -np.inf) if lo is None else np.asarray(lo, float)
        self.ineq_hi = np.full(n_in, np.inf) if hi is None else np.asarray(hi, float)

    def _call(self, fn, x, m):
        if fn is None:
            return np.zeros(0), sp.csr_matrix((0, self.n_tangent))
        val, J = fn(x)
        return np.atleast_1d(np.asarray(val, float)), sp.csr_matrix(np.atleast_2d(J)).reshape(
            (m if m is not None else len(np.atleast_1d(val)), self.n_tangent))

    def evaluate(self, x, derivatives=True):
        x = np.asarray(x, dtype=float)
        terms = []
        for name, sign, fn in self._costs:
            rho, J = self._call(fn, x, None)
            terms.append(CostValue(name, float(sign), rho, J))
        c, Jc = self._call(self._eq, x, None)
        g, Jg = self._call(self._ineq, x, None)
        return Evaluation(terms, c, g, Jc, Jg)


# ---------------------------------------------------------------------------
# per-knot kernels (vectorized over leading knot dimension)
# ---------------------------------------------------------------------------

def centroidal_dynamics_residual(mass, rdd, hd, r, c, f, gravity=GRAVITY):
    """Linear and angular momentum balance: ``(m rdd - sum f - m g,
    hd - sum (c_i - r) x f_i)``.  ``c`` and ``f`` have shape (..., nc, 3)."""
    lin = mass * np.asarray(rdd) - np.sum(f, axis=-2) - mass * np.asarray(gravity)
    ang = np.asarray(hd) - np.sum(np.cross(np.asarray(c) - np.asarray(r)[..., None, :], f), axis=-2)
    return lin, ang


def centroidal_integration_residual(r0, rd0, rdd0, h0, hd0, r1, rd1, h1, dt):
    """Explicit Euler: position, velocity and momentum steps stacked (9,)."""
    return np.concatenate([np.asarray(r1) - r0 - np.asarray(rd0) * dt,
                           np.asarray(rd1) - rd0 - np.asarray(rdd0) * dt,
                           np.asarray(h1) - h0 - np.asarray(hd0) * dt], axis=-1)


def pose_integration_residual(q0, v0, q1, dt):
    """Tangent difference between ``q1`` and ``q0 (+) v0 dt``."""
    return difference_configuration(integrate_configuration(q0, v0, dt), q1)


def friction_pyramid(f, mu):
    """Values that must be non-negative: ``mu fz -+ fx``, ``mu fz -+ fy``, ``fz``."""
    f = np.asarray(f, dtype=float)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return np.stack([mu * fz - fx, mu * fz + fx, mu * fz - fy, mu * fz + fy, fz], axis=-1)


_PYRAMID_X = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, 0]], dtype=float)
_PYRAMID_Z = np.array([1, 1, 1, 1, 0], dtype=float)


def approach_angle(body_xy, ball_xy):
    """Planar angle between the body-to-ball direction and the forward axis."""
    d = np.asarray(ball_xy, dtype=float) - np.asarray(body_xy, dtype=float)
    norm = np.hypot(d[0], d[1])
    if norm < 1e-9:
        raise TranscriptionError("ball position coincides with the body position")
    return math.atan2(abs(d[1]), d[0])


def _approach_gradient(body_xy, ball_xy):
    """d theta / d body_xy."""
    d = np.asarray(ball_xy, float) - np.asarray(body_xy, float)
    n2 = d @ d
    dtheta_dd = np.array([-abs(d[1]), np.sign(d[1]) * d[0]]) / n2
    return -dtheta_dd


def swing_gate(k: int, dt: float, timings: KickTimings | None) -> float:
    if timings is None:
        return 0.0
    t = k * dt
    return 1.0 if timings.swing - 1e-9 <= t <= timings.impact + 1e-9 else 0.0


def _foot_marker(model):
    tag = model.tags.get("kicking_foot")
    if tag is None:
        raise TranscriptionError("model has no kicking_foot tag")
    return int(tag["link"]), np.asarray(tag["offset"], dtype=float)


def foot_velocity(model, q, v):
    """World velocity of the kicking-foot marker."""
    link, offset = _foot_marker(model)
    poses = forward_kinematics(model, q)
    p = poses.p[..., link, :] + np.einsum("...ij,j->...i", poses.R[..., link, :, :], offset)
    J = points_jacobian(model, poses, [link], p[..., None, :])[..., 0, :, :]
    return np.einsum("...ij,...j->...i", J, v)


# ---------------------------------------------------------------------------
# standalone cost and residual evaluators (single knot)
# ---------------------------------------------------------------------------

def cost_reference(model, q, keypoints_ref, Q_m=10.0) -> float:
    """Weighted squared keypoint tracking error of one knot."""
    err = marker_positions(model, model.keypoints, q) - np.asarray(keypoints_ref)
    w = np.broadcast_to(np.asarray(Q_m, dtype=float), (len(model.keypoints),))
    return float(np.sum(w * np.sum(err ** 2, axis=-1)))


def cost_impact(model, q, v, k, dt, timings, Q_i=1.0) -> float:
    zeta = swing_gate(k, dt, timings)
    if zeta == 0.0:
        return 0.0
    u = foot_velocity(model, q, v)
    return float(-zeta * Q_i * (u @ u))


def cost_regularization(v, h, f, zeta, Q_v=1e-2, Q_h=1e-2, Q_f=1e-5) -> float:
    v, h, f = (np.asarray(a, dtype=float) for a in (v, h, f))
    return float((1.0 - zeta) * Q_v * (v @ v) + Q_h * (h @ h) + Q_f * np.sum(f * f))


def residual_consistency(model, q, v, r, h, c) -> np.ndarray:
    """``(h - A_CAM v, r - com(q), c_i - contact_i(q))`` stacked."""
    poses = forward_kinematics(model, q)
    A = centroidal_momentum_matrix(model, poses=poses)[3:]
    pts = marker_positions(model, model.contact_points, poses=poses)
    return np.concatenate([h - A @ v, r - center_of_mass(model, poses=poses),
                           (np.asarray(c) - pts).ravel()])


def torque_proxy(model, q, f) -> np.ndarray:
    """Joint torques balancing the contact forces through the contact
    Jacobians: ``-S^T sum_i J_i^T f_i``."""
    poses = forward_kinematics(model, q)
    pts = marker_positions(model, model.contact_points, poses=poses)
    J = points_jacobian(model, poses, [c.link for c in model.contact_points], pts)
    return -np.einsum("...pij,...pi->...j", J[..., 6:], np.asarray(f, dtype=float))


def capsule_clearance(model, q, pairs=None) -> np.ndarray:
    """Axis distance minus the radius sum for every collision pair."""
    pairs = model.collision_pairs if pairs is None else pairs
    poses = forward_kinematics(model, q)
    out = []
    for a, b in pairs:
        pa0, pa1, ra = _capsule(model, poses, a)
        pb0, pb1, rb = _capsule(model, poses, b)
        s, t = segment_closest_parameters(pa0, pa1, pb0, pb1)
        d = (pa0 + s[..., None] * (pa1 - pa0)) - (pb0 + t[..., None] * (pb1 - pb0))
        out.append(np.linalg.norm(d, axis=-1) - ra - rb)
    return np.stack(out, axis=-1) if out else np.zeros(np.shape(q)[:-1] + (0,))


def _capsule(model, poses, link):
    cap = model.links[link].capsule
    R, p = poses.R[..., link, :, :], poses.p[..., link, :]
    return (p + np.einsum("...ij,j->...i", R, cap.a),
            p + np.einsum("...ij,j->...i", R, cap.b), cap.radius)


# ---------------------------------------------------------------------------
# assembly helpers
# ---------------------------------------------------------------------------

@dataclass
class _Piece:
    knots: np.ndarray    # (G,) knot owning the variable of each row group
    block: str
    D: np.ndarray        # (G, m, d)
    cols: np.ndarray | None = None   # (d,) or (G, d) in-block indices


@dataclass
class _Family:
    name: str
    kind: str            # "eq", "ineq" or "cost"
    n_groups: int
    m: int
    fn: object           # fn(cache, derivatives) -> (values (G, m), [pieces])
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    sign: float = 1.0

    @property
    def n_rows(self) -> int:
        return self.n_groups * self.m


def _scatter(layout, family, pieces, n_cols):
    rows_base = np.arange(family.n_rows).reshape(family.n_groups, family.m)
    R, C, V = [], [], []
    for piece in pieces:
        cols = layout.columns(piece.knots, piece.block, piece.cols)   # (G, d)
        G, m, d = piece.D.shape
        R.append(np.broadcast_to(rows_base[:, :, None], (G, m, d)).ravel())
        C.append(np.broadcast_to(cols[:, None, :], (G, m, d)).ravel())
        V.append(piece.D.ravel())
    if not R:
        return sp.csr_matrix((family.n_rows, n_cols))
    return sp.csr_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))),
                         shape=(family.n_rows, n_cols))


def _tangent_fd(model, Q, fn, step=FD_STEP):
    """Central differences of ``fn`` over the configuration tangent.

    ``fn`` maps configurations of shape (N, B, nq) to values (N, B, m);
    the result has shape (N, m, nv)."""
    nv = model.nv
    E = np.eye(nv) * step
    Qp = integrate_configuration(Q[:, None, :], E[None])
    Qm = integrate_configuration(Q[:, None, :], -E[None])
    vals = fn(np.concatenate([Qp, Qm], axis=1))
    return np.swapaxes((vals[:, :nv] - vals[:, nv:]) / (2 * step), 1, 2)


class _Kinematics:
    """Lazily evaluated kinematic quantities for all knots at once."""

    def __init__(self, model, Q):
        self.model, self.Q = model, Q

    @cached_property
    def poses(self):
        return forward_kinematics(self.model, self.Q)

    @cached_property
    def contact_links(self):
        return [c.link for c in self.model.contact_points]

    @cached_property
    def contacts(self):
        return marker_positions(self.model, self.model.contact_points, poses=self.poses)

    @cached_property
    def contact_jac(self):
        return points_jacobian(self.model, self.poses, self.contact_links, self.contacts)

    @cached_property
    def keypoints(self):
        return marker_positions(self.model, self.model.keypoints, poses=self.poses)

    @cached_property
    def keypoint_jac(self):
        links = [k.link for k in self.model.keypoints]
        return points_jacobian(self.model, self.poses, links, self.keypoints)

    @cached_property
    def com(self):
        return center_of_mass(self.model, poses=self.poses)

    @cached_property
    def com_jac(self):
        return com_jacobian(self.model, poses=self.poses)

    @cached_property
    def cam(self):
        return centroidal_momentum_matrix(self.model, poses=self.poses)[:, 3:]

    def foot(self):
        link, offset = _foot_marker(self.model)
        p = self.poses.p[:, link] + np.einsum("nij,j->ni", self.poses.R[:, link], offset)
        J = points_jacobian(self.model, self.poses, [link], p[:, None])[:, 0]
        return p, J


# ---------------------------------------------------------------------------
# the trajectory problem
# ---------------------------------------------------------------------------

class TrajectoryProblem(NlpProblem):
    """Transcribed kicking problem for one stage."""

    def __init__(self, spec: ProblemSpec, stage: str, initial: KinodynamicTrajectory):
        self.spec, self.stage = spec, stage
        model = spec.model
        self.model = model
        self.layout = Layout(model, spec.n_knots, stage)
        initial.check(model)
        if stage == "full" and not initial.has_centroidal:
            initial = seed_centroidal(spec, initial)
        self.x0 = self.layout.pack(initial)
        self.n_tangent = self.layout.n_tangent
        self.zeta = spec.schedule.swing_gate()
        self.families = _build_families(self)
        self.eq_families, self.ineq_families = {}, {}
        lo, hi = [], []
        counts = {"eq": 0, "ineq": 0}
        for fam in self.families:
            if fam.kind == "cost":
                continue
            start = counts[fam.kind]
            counts[fam.kind] += fam.n_rows
            target = self.eq_families if fam.kind == "eq" else self.ineq_families
            target[fam.name] = slice(start, start + fam.n_rows)
            if fam.kind == "ineq":
                lo.append(np.broadcast_to(fam.lo, (fam.n_groups, fam.m)).ravel())
                hi.append(np.broadcast_to(fam.hi, (fam.n_groups, fam.m)).ravel())
        self.ineq_lo = np.concatenate(lo) if lo else np.zeros(0)
        self.ineq_hi = np.concatenate(hi) if hi else np.zeros(0)

    # -- counts ------------------------------------------------------------
    def counts(self) -> dict:
        return {"stage": self.stage, "knots": self.layout.n_knots,
                "variables": self.layout.n_variables, "tangent": self.layout.n_tangent,
                "equalities": self.n_eq, "inequalities": self.n_ineq,
                "cost_terms": [f.name for f in self.families if f.kind == "cost"]}

    # -- manifold ----------------------------------------------------------
    def retract(self, x, dx):
        return self.layout.retract(x, dx)

    def decode(self, x) -> KinodynamicTrajectory:
        return self.layout.trajectory(x, self.spec.dt)

    # -- evaluation --------------------------------------------------------
    def evaluate(self, x, derivatives=True) -> Evaluation:
        blocks = self.layout.unpack(x)
        cache = {"x": blocks, "kin": _Kinematics(self.model, blocks["q"])}
        n = self.n_tangent
        terms, eq, ineq, eq_J, ineq_J = [], [], [], [], []
        for fam in self.families:
            values, pieces = fam.fn(cache, derivatives)
            values = np.asarray(values, dtype=float).reshape(fam.n_rows)
            J = _scatter(self.layout, fam, pieces, n) if derivatives else None
            if fam.kind == "cost":
                terms.append(CostValue(fam.name, fam.sign, values, J))
            elif fam.kind == "eq":
                eq.append(values)
                eq_J.append(J)
            else:
                ineq.append(values)
                ineq_J.append(J)
        stack = (lambda Js: sp.vstack(Js, format="csr") if Js else sp.csr_matrix((0, n)))
        return Evaluation(
            terms,
            np.concatenate(eq) if eq else np.zeros(0),
            np.concatenate(ineq) if ineq else np.zeros(0),
            stack(eq_J) if derivatives else None,
            stack(ineq_J) if derivatives else None)


def _build_families(prob: TrajectoryProblem) -> list[_Family]:
    spec, model, layout = prob.spec, prob.model, prob.layout
    N, nv, nc, n = spec.n_knots, model.nv, model.n_contacts, model.n_joints
    dt = spec.dt
    knots = np.arange(N)
    full = prob.stage == "full"
    W = spec.weights
    zeta = prob.zeta
    active = spec.schedule.active
    fams: list[_Family] = []

    # -- costs -------------------------------------------------------------
    K = len(model.keypoints)
    ref = spec.reference.reshape(N, 3 * K)
    w_ref = np.sqrt(np.repeat(np.broadcast_to(np.asarray(W.Q_m, float), (K,)), 3))

    def f_ref(cache, der):
        kin = cache["kin"]
        val = w_ref * (kin.keypoints.reshape(N, 3 * K) - ref)
        pieces = []
        if der:
            pieces.append(_Piece(knots, "q", w_ref[:, None] * kin.keypoint_jac.reshape(N, 3 * K, nv)))
        return val, pieces

    fams.append(_Family("J_ref", "cost", N, 3 * K, f_ref))

    gated = np.flatnonzero(zeta > 0)
    if full and len(gated):
        s_imp = math.sqrt(W.Q_i)

        def f_imp(cache, der):
            kin, V = cache["kin"], cache["x"]["v"]
            _, J = kin.foot()
            Vg = V[gated]
            val = s_imp * np.einsum("nij,nj->ni", J[gated], Vg)
            pieces = []
            if der:
                link, offset = _foot_marker(model)

                def fn(Qb):
                    poses = forward_kinematics(model, Qb)
                    p = poses.p[..., link, :] + np.einsum("...ij,j->...i", poses.R[..., link, :, :], offset)
                    Jb = points_jacobian(model, poses, [link], p[..., None, :])[..., 0, :, :]
                    return np.einsum("nbij,nj->nbi", Jb, Vg)

                pieces.append(_Piece(gated, "v", s_imp * J[gated]))
                pieces.append(_Piece(gated, "q", s_imp * _tangent_fd(model, kin.Q[gated], fn)))
            return val, pieces

        fams.append(_Family("J_imp", "cost", len(gated), 3, f_imp, sign=-1.0))

    free = np.flatnonzero(zeta < 1)
    s_v = np.sqrt((1.0 - zeta[free]) * W.Q_v)

    def f_vreg(cache, der):
        val = s_v[:, None] * cache["x"]["v"][free]
        pieces = [_Piece(free, "v", s_v[:, None, None] * np.eye(nv)[None].repeat(len(free), 0))] if der else []
        return val, pieces

    fams.append(_Family("J_reg_v", "cost", len(free), nv, f_vreg))

    if full:
        s_h, s_f = math.sqrt(W.Q_h), math.sqrt(W.Q_f)
        eye3 = np.broadcast_to(np.eye(3), (N, 3, 3))
        eyef = np.broadcast_to(np.eye(3 * nc), (N, 3 * nc, 3 * nc))

        def f_hreg(cache, der):
            return s_h * cache["x"]["h"], ([_Piece(knots, "h", s_h * eye3)] if der else [])

        def f_freg(cache, der):
            return s_f * cache["x"]["f"], ([_Piece(knots, "f", s_f * eyef)] if der else [])

        fams.append(_Family("J_reg_h", "cost", N, 3, f_hreg))
        fams.append(_Family("J_reg_f", "cost", N, 3 * nc, f_freg))

    # -- pose integration --------------------------------------------------
    k0, k1 = knots[:-1], knots[1:]

    def f_pose(cache, der):
        Q, V = cache["x"]["q"], cache["x"]["v"]
        val = pose_integration_residual(Q[:-1], V[:-1], Q[1:], dt)
        pieces = []
        if der:
            M = N - 1
            phi = val[:, 3:6]
            w_dt = V[:-1, 3:6] * dt
            Jl_inv = left_jacobian_inv(phi)
            D1 = np.zeros((M, nv, nv))
            D0 = np.zeros((M, nv, nv))
            Dv = np.zeros((M, nv, nv))
            D1[:, 0:3, 0:3] = np.eye(3)
            D0[:, 0:3, 0:3] = -np.eye(3)
            Dv[:, 0:3, 0:3] = -dt * np.eye(3)
            D1[:, 3:6, 3:6] = right_jacobian_inv(phi)
            Rw = quat_to_matrix(quat_exp(w_dt))
            D0[:, 3:6, 3:6] = -Jl_inv @ np.swapaxes(Rw, -1, -2)
            Dv[:, 3:6, 3:6] = -dt * Jl_inv @ right_jacobian(w_dt)
            D1[:, 6:, 6:] = np.eye(n)
            D0[:, 6:, 6:] = -np.eye(n)
            Dv[:, 6:, 6:] = -dt * np.eye(n)
            pieces = [_Piece(k1, "q", D1), _Piece(k0, "q", D0), _Piece(k0, "v", Dv)]
        return val, pieces

    fams.append(_Family("pose_integration", "eq", N - 1, nv, f_pose))

    # -- contacts ----------------------------------------------------------
    act_k, act_i = np.nonzero(active)
    ina_k, ina_i = np.nonzero(~active)
    both = active[1:] & active[:-1]
    slip_k, slip_i = np.nonzero(both)
    slip_k = slip_k + 1
    ground = spec.ground

    def contact_positions(cache):
        """(positions (N, nc, 3), derivative source) for the stage."""
        if full:
            return cache["x"]["c"].reshape(N, nc, 3)
        return cache["kin"].contacts

    def position_pieces(cache, ks, idx, rows):
        """Derivative of contact coordinates ``rows`` of points ``idx`` at
        knots ``ks`` with respect to the stage variables."""
        if full:
            G = len(ks)
            D = np.zeros((G, len(rows), 3))
            D[:, np.arange(len(rows)), rows] = 1.0
            return "c", D, 3 * idx[:, None] + np.arange(3)[None]
        J = cache["kin"].contact_jac[ks, idx]      # (G, 3, nv)
        return "q", J[:, rows], None

    if len(act_k):
        def f_ground(cache, der):
            P = contact_positions(cache)[act_k, act_i]
            z, grad = ground(P[:, :2])
            val = (P[:, 2] - z)[:, None]
            pieces = []
            if der:
                block, D, cols = position_pieces(cache, act_k, act_i, [0, 1, 2])
                row = np.concatenate([-grad, np.ones((len(act_k), 1))], axis=1)  # (G, 3)
                pieces.append(_Piece(act_k, block, np.einsum("gj,gjd->gd", row, D)[:, None], cols))
            return val, pieces

        fams.append(_Family("contact_height", "eq", len(act_k), 1, f_ground))

    if len(slip_k):
        def f_slip(cache, der):
            P = contact_positions(cache)
            val = P[slip_k, slip_i, :2] - P[slip_k - 1, slip_i, :2]
            pieces = []
            if der:
                b1, D1, c1 = position_pieces(cache, slip_k, slip_i, [0, 1])
                b0, D0, c0 = position_pieces(cache, slip_k - 1, slip_i, [0, 1])
                pieces = [_Piece(slip_k, b1, D1, c1), _Piece(slip_k - 1, b0, -D0, c0)]
            return val, pieces

        fams.append(_Family("no_slip", "eq", len(slip_k), 2, f_slip))

    if len(ina_k):
        def f_clear(cache, der):
            P = contact_positions(cache)[ina_k, ina_i]
            z, grad = ground(P[:, :2])
            val = (P[:, 2] - z)[:, None]
            pieces = []
            if der:
                block, D, cols = position_pieces(cache, ina_k, ina_i, [0, 1, 2])
                row = np.concatenate([-grad, np.ones((len(ina_k), 1))], axis=1)
                pieces.append(_Piece(ina_k, block, np.einsum("gj,gjd->gd", row, D)[:, None], cols))
            return val, pieces

        fams.append(_Family("ground_clearance", "ineq", len(ina_k), 1, f_clear,
                            lo=np.zeros(1), hi=np.full(1, np.inf)))

    if full:
        if len(act_k):
            fcols_a = 3 * act_i[:, None] + np.arange(3)[None]
            D_pyr = np.broadcast_to(_PYRAMID_X + spec.mu * np.outer(_PYRAMID_Z, [0, 0, 1])
                                    + np.outer([0, 0, 0, 0, 1], [0, 0, 1]), (len(act_k), 5, 3))

            def f_friction(cache, der):
                F = cache["x"]["f"].reshape(N, nc, 3)[act_k, act_i]
                return friction_pyramid(F, spec.mu), ([_Piece(act_k, "f", D_pyr, fcols_a)] if der else [])

            fams.append(_Family("friction", "ineq", len(act_k), 5, f_friction,
                                lo=np.zeros(5), hi=np.full(5, np.inf)))
        if len(ina_k):
            fcols_i = 3 * ina_i[:, None] + np.arange(3)[None]
            eye_i = np.broadcast_to(np.eye(3), (len(ina_k), 3, 3))

            def f_zero(cache, der):
                F = cache["x"]["f"].reshape(N, nc, 3)[ina_k, ina_i]
                return F, ([_Piece(ina_k, "f", eye_i, fcols_i)] if der else [])

            fams.append(_Family("inactive_force", "eq", len(ina_k), 3, f_zero))

    # -- centroidal dynamics, integration, consistency ---------------------
    if full:
        mass = model.total_mass

        def f_dyn(cache, der):
            X = cache["x"]
            C = X["c"].reshape(N, nc, 3)
            F = X["f"].reshape(N, nc, 3)
            lin, ang = centroidal_dynamics_residual(mass, X["rdd"], X["hd"], X["r"], C, F)
            val = np.concatenate([lin, ang], axis=1)
            pieces = []
            if der:
                D_rdd = np.zeros((N, 6, 3))
                D_rdd[:, :3] = mass * np.eye(3)
                D_hd = np.zeros((N, 6, 3))
                D_hd[:, 3:] = np.eye(3)
                Fx = skew(F)                                   # (N, nc, 3, 3)
                D_r = np.zeros((N, 6, 3))
                D_r[:, 3:] = -np.sum(Fx, axis=1)
                D_c = np.zeros((N, 6, 3 * nc))
                D_c[:, 3:] = np.concatenate(list(np.moveaxis(Fx, 1, 0)), axis=-1)
                arm = skew(C - X["r"][:, None])
                D_f = np.zeros((N, 6, 3 * nc))
                D_f[:, :3] = np.tile(-np.eye(3), (1, nc))
                D_f[:, 3:] = np.concatenate(list(np.moveaxis(-arm, 1, 0)), axis=-1)
                pieces = [_Piece(knots, "rdd", D_rdd), _Piece(knots, "hd", D_hd),
                          _Piece(knots, "r", D_r), _Piece(knots, "c", D_c), _Piece(knots, "f", D_f)]
            return val, pieces

        fams.append(_Family("centroidal_dynamics", "eq", N, 6, f_dyn))

        def f_int(cache, der):
            X = cache["x"]
            val = centroidal_integration_residual(X["r"][:-1], X["rd"][:-1], X["rdd"][:-1],
                                                  X["h"][:-1], X["hd"][:-1],
                                                  X["r"][1:], X["rd"][1:], X["h"][1:], dt)
            pieces = []
            if der:
                M = N - 1

                def sel(rows, scale):
                    D = np.zeros((M, 9, 3))
                    D[:, rows] = scale * np.eye(3)
                    return D

                a, b, c_ = slice(0, 3), slice(3, 6), slice(6, 9)
                pieces = [
                    _Piece(k1, "r", sel(a, 1.0)), _Piece(k0, "r", sel(a, -1.0)),
                    _Piece(k0, "rd", sel(a, -dt) + sel(b, -1.0)), _Piece(k1, "rd", sel(b, 1.0)),
                    _Piece(k0, "rdd", sel(b, -dt)),
                    _Piece(k1, "h", sel(c_, 1.0)), _Piece(k0, "h", sel(c_, -1.0)),
                    _Piece(k0, "hd", sel(c_, -dt)),
                ]
            return val, pieces

        fams.append(_Family("centroidal_integration", "eq", N - 1, 9, f_int))

        def f_cons(cache, der):
            X, kin = cache["x"], cache["kin"]
            V = X["v"]
            A = kin.cam
            val = np.concatenate([
                X["h"] - np.einsum("nij,nj->ni", A, V),
                X["r"] - kin.com,
                X["c"] - kin.contacts.reshape(N, 3 * nc)], axis=1)
            pieces = []
            if der:
                m_rows = 6 + 3 * nc
                D_h = np.zeros((N, m_rows, 3))
                D_h[:, 0:3] = np.eye(3)
                D_r = np.zeros((N, m_rows, 3))
                D_r[:, 3:6] = np.eye(3)
                D_c = np.zeros((N, m_rows, 3 * nc))
                D_c[:, 6:] = np.eye(3 * nc)
                D_v = np.zeros((N, m_rows, nv))
                D_v[:, 0:3] = -A

                def fn(Qb):
                    Ab = centroidal_momentum_matrix(model, Qb)[..., 3:, :]
                    return np.einsum("nbij,nj->nbi", Ab, V)

                D_q = np.zeros((N, m_rows, nv))
                D_q[:, 0:3] = -_tangent_fd(model, kin.Q, fn)
                D_q[:, 3:6] = -kin.com_jac
                D_q[:, 6:] = -kin.contact_jac.reshape(N, 3 * nc, nv)
                pieces = [_Piece(knots, "h", D_h), _Piece(knots, "r", D_r), _Piece(knots, "c", D_c),
                          _Piece(knots, "v", D_v), _Piece(knots, "q", D_q)]
            return val, pieces

        fams.append(_Family("consistency", "eq", N, 6 + 3 * nc, f_cons))

        # the explicit scheme leaves the last knot's rates free; pin them so
        # that the final two knots carry meaningful contact forces
        last, prev = np.array([N - 1]), np.array([N - 2])

        def f_term(cache, der):
            X, kin = cache["x"], cache["kin"]
            V = X["v"]
            val = np.concatenate([X["rd"][-1] - kin.com_jac[-1] @ V[-1], V[-1] - V[-2],
                                  X["rdd"][-1] - X["rdd"][-2], X["hd"][-1] - X["hd"][-2]])[None]
            pieces = []
            if der:
                m_rows = 9 + nv
                eye3, eyev = np.eye(3), np.eye(nv)

                def block(rows, M):
                    D = np.zeros((1, m_rows, M.shape[1]))
                    D[0, rows] = M
                    return D

                a, b = slice(0, 3), slice(3, 3 + nv)
                c_, d_ = slice(3 + nv, 6 + nv), slice(6 + nv, 9 + nv)

                def fn(Qb):
                    return np.einsum("nbij,j->nbi", com_jacobian(model, Qb), V[-1])

                pieces = [
                    _Piece(last, "rd", block(a, eye3)),
                    _Piece(last, "v", block(a, -kin.com_jac[-1]) + block(b, eyev)),
                    _Piece(last, "q", block(a, -_tangent_fd(model, kin.Q[-1:], fn)[0])),
                    _Piece(prev, "v", block(b, -eyev)),
                    _Piece(last, "rdd", block(c_, eye3)), _Piece(prev, "rdd", block(c_, -eye3)),
                    _Piece(last, "hd", block(d_, eye3)), _Piece(prev, "hd", block(d_, -eye3)),
                ]
            return val, pieces

        fams.append(_Family("terminal", "eq", 1, 9 + nv, f_term))

    # -- ankle lock --------------------------------------------------------
    lock_knots = np.flatnonzero(spec.schedule.lock_mask())
    lock_dofs = np.array([6 + model.joint_index(j) for j in spec.lock_joints], dtype=int)
    if full and len(lock_knots) and len(lock_dofs):
        D_lock = np.broadcast_to(np.eye(len(lock_dofs)), (len(lock_knots),) + (len(lock_dofs),) * 2)

        def f_lock(cache, der):
            val = cache["x"]["v"][np.ix_(lock_knots, lock_dofs)]
            return val, ([_Piece(lock_knots, "v", D_lock, lock_dofs)] if der else [])

        fams.append(_Family("ankle_lock", "eq", len(lock_knots), len(lock_dofs), f_lock))

    # -- joint limits ------------------------------------------------------
    for name, block, (lo, hi) in (("joint_position", "q", model.position_limits),
                                  ("joint_velocity", "v", model.velocity_limits)):
        sel = np.flatnonzero(np.isfinite(lo) | np.isfinite(hi))
        if not len(sel):
            continue
        amb = sel + (7 if block == "q" else 6)
        tan = sel + 6
        D_lim = np.broadcast_to(np.eye(len(sel)), (N, len(sel), len(sel)))

        def f_lim(cache, der, block=block, amb=amb, tan=tan, D_lim=D_lim):
            return cache["x"][block][:, amb], ([_Piece(knots, block, D_lim, tan)] if der else [])

        fams.append(_Family(name, "ineq", N, len(sel), f_lim, lo=lo[sel], hi=hi[sel]))

    # -- torque proxy ------------------------------------------------------
    if full:
        t_lo, t_hi = spec.proxy_bounds()
        tsel = np.flatnonzero(np.isfinite(t_lo) | np.isfinite(t_hi))
        if len(tsel):
            def f_proxy(cache, der):
                kin, F = cache["kin"], cache["x"]["f"].reshape(N, nc, 3)
                J = kin.contact_jac[..., 6 + tsel]            # (N, nc, 3, m)
                val = -np.einsum("npim,npi->nm", J, F)
                pieces = []
                if der:
                    D_f = -np.swapaxes(J, -1, -2)                # (N, nc, m, 3)
                    D_f = np.concatenate(list(np.moveaxis(D_f, 1, 0)), axis=-1)
                    links = kin.contact_links

                    def fn(Qb):
                        poses = forward_kinematics(model, Qb)
                        pts = marker_positions(model, model.contact_points, poses=poses)
                        Jb = points_jacobian(model, poses, links, pts)[..., 6 + tsel]
                        return -np.einsum("nbpim,npi->nbm", Jb, F)

                    pieces = [_Piece(knots, "f", D_f), _Piece(knots, "q", _tangent_fd(model, kin.Q, fn))]
                return val, pieces

            fams.append(_Family("torque_proxy", "ineq", N, len(tsel), f_proxy,
                                lo=t_lo[tsel], hi=t_hi[tsel]))

    # -- capsule collision -------------------------------------------------
    pairs = list(model.collision_pairs)
    if pairs:
        def f_coll(cache, der):
            kin = cache["kin"]
            vals, pieces_D = [], []
            for a, b in pairs:
                pa0, pa1, ra = _capsule(model, kin.poses, a)
                pb0, pb1, rb = _capsule(model, kin.poses, b)
                s, t = segment_closest_parameters(pa0, pa1, pb0, pb1)
                pa = pa0 + s[:, None] * (pa1 - pa0)
                pb = pb0 + t[:, None] * (pb1 - pb0)
                d = pa - pb
                dist = np.linalg.norm(d, axis=-1)
                vals.append(dist - ra - rb)
                if der:
                    nrm = d / np.maximum(dist, 1e-12)[:, None]
                    Ja = points_jacobian(model, kin.poses, [a], pa[:, None])[:, 0]
                    Jb = points_jacobian(model, kin.poses, [b], pb[:, None])[:, 0]
                    pieces_D.append(np.einsum("ni,nij->nj", nrm, Ja - Jb))
            val = np.stack(vals, axis=1)
            pieces = [_Piece(knots, "q", np.stack(pieces_D, axis=1))] if der else []
            return val, pieces

        fams.append(_Family("collision", "ineq", N, len(pairs), f_coll,
                            lo=np.zeros(len(pairs)), hi=np.full(len(pairs), np.inf)))

    # -- approach angle ----------------------------------------------------
    if full and spec.ball_xy is not None:
        ball = spec.ball_xy

        def f_approach(cache, der):
            body = cache["x"]["q"][0, :2]
            val = np.array([[approach_angle(body, ball)]])
            pieces = []
            if der:
                D = _approach_gradient(body, ball)[None, None, :]
                pieces.append(_Piece(np.array([0]), "q", D, np.array([0, 1])))
            return val, pieces

        fams.append(_Family("approach_angle", "ineq", 1, 1, f_approach,
                            lo=np.array([spec.theta_min]), hi=np.array([spec.theta_max])))
    return fams


# ---------------------------------------------------------------------------
# seeding and construction
# ---------------------------------------------------------------------------

def _forward_difference(x, dt):
    d = np.empty_like(x)
    d[:-1] = (x[1:] - x[:-1]) / dt
    d[-1] = d[-2]
    return d


def static_forces(model: RobotModel, active: np.ndarray) -> np.ndarray:
    """Weight ``m g`` split equally over the active points of each knot."""
    active = np.asarray(active, dtype=bool)
    f = np.zeros(active.shape + (3,))
    counts = active.sum(axis=1)
    weight = -model.total_mass * GRAVITY[2]
    for k, count in enumerate(counts):
        if count:
            f[k, active[k], 2] = weight / count
    return f


def seed_centroidal(spec: ProblemSpec, kinematic: KinodynamicTrajectory) -> KinodynamicTrajectory:
    """Fill the centroidal variables from kernel evaluations on ``q, v``."""
    model, dt = spec.model, spec.dt
    q, v = kinematic.q, kinematic.v
    poses = forward_kinematics(model, q)
    r = center_of_mass(model, poses=poses)
    rd = _forward_difference(r, dt)
    rdd = _forward_difference(rd, dt)
    h = np.einsum("nij,nj->ni", centroidal_momentum_matrix(model, poses=poses)[:, 3:], v)
    hd = _forward_difference(h, dt)
    c = marker_positions(model, model.contact_points, poses=poses)
    f = static_forces(model, spec.schedule.active)
    return KinodynamicTrajectory(dt, q.copy(), v.copy(), r, rd, rdd, h, hd, c, f)


def velocities_from_configurations(q, dt: float) -> np.ndarray:
    """``v_k`` with ``q_{k+1} = q_k (+) v_k dt``; the last knot repeats."""
    q = np.asarray(q, dtype=float)
    v = np.empty((q.shape[0], q.shape[1] - 1))
    v[:-1] = difference_configuration(q[:-1], q[1:]) / dt
    v[-1] = v[-2]
    return v


def build_problem(spec: ProblemSpec, stage: str, initial: KinodynamicTrajectory | None = None
                  ) -> TrajectoryProblem:
    """Transcribe ``spec`` for the ``"kinematics"`` or ``"full"`` stage.

    The full stage needs a warm start; a kinematic trajectory is completed
    with :func:`seed_centroidal`.  Without ``initial`` the kinematics stage
    starts from the neutral pose translated onto the reference root.
    """
    if stage not in ("kinematics", "full"):
        raise TranscriptionError(f"unknown stage {stage!r}")
    if initial is None:
        if stage == "full":
            raise TranscriptionError("the full stage needs an initial trajectory")
        model = spec.model
        q = np.repeat(model.neutral_configuration()[None], spec.n_knots, axis=0)
        root = marker_positions(model, model.keypoints[:1], model.neutral_configuration())[0]
        q[:, :3] = spec.reference[:, 0] - root
        initial = KinodynamicTrajectory(spec.dt, q, velocities_from_configurations(q, spec.dt))
    if initial.n_knots != spec.n_knots:
        raise TranscriptionError(
            f"initial trajectory has {initial.n_knots} knots, schedule has {spec.n_knots}")
    if abs(initial.dt - spec.dt) > 1e-12:
        raise TranscriptionError("initial trajectory and schedule use different dt")
    if stage == "kinematics":
        initial = initial.kinematic()
    return TrajectoryProblem(spec, stage, initial)
