"""Augmented-Lagrangian NLP solver, two-stage retargeting and torque
verification.

Inequalities ``lo <= g(x) <= hi`` get bound-constrained slacks that are
eliminated in closed form, ``s = clip(g + lam/rho, lo, hi)``.  The inner
problem is solved with a damped Gauss-Newton method on the sparse normal
equations and an Armijo line search along the manifold retraction.  Once
the constraint violation is small, a few minimum-norm Newton projections
onto the active constraint set finish the feasibility phase.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .kinodyn import GRAVITY, forward_kinematics, integrate_configuration, inverse_dynamics, marker_positions, points_jacobian
from .model import RobotModel
from .transcription import (
    KinodynamicTrajectory,
    NlpProblem,
    ProblemSpec,
    build_problem,
    seed_centroidal,
    velocities_from_configurations,
)

log = logging.getLogger(__name__)


@dataclass
class SolverOptions:
    eq_tol: float = 1e-4
    ineq_tol: float = 1e-6
    stationarity_tol: float = 1e-4
    max_outer: int = 40
    max_inner: int = 60
    penalty_init: float = 1e3
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    required_decrease: float = 0.25
    damping: float = 1e-8
    polish_steps: int = 8
    polish_threshold: float = 1e4
    kkt_regularization: float = 1e-8
    backoff: float = 0.9
    seed: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, doc: dict) -> "SolverOptions":
        unknown = set(doc) - set(cls().__dict__)
        if unknown:
            raise ValueError(f"unknown solver options: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class SolveReport:
    iterations: int
    inner_iterations: int
    cost: float
    max_eq: float
    l1_eq: float
    max_ineq: float
    stationarity: float
    families: dict
    converged: bool
    history: list = field(default_factory=list)
    message: str = ""
    wall_time: float = 0.0

    @property
    def not_converged(self) -> bool:
        return not self.converged

    def to_dict(self, include_time: bool = False) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "wall_time"}
        out["not_converged"] = self.not_converged
        if include_time:
            out["wall_time"] = self.wall_time
        return out


def residual_statistics(problem: NlpProblem, x) -> dict:
    """Cost and constraint statistics recomputed from scratch at ``x``."""
    ev = problem.evaluate(x, derivatives=False)
    viol = problem.ineq_violation(ev.ineq)
    return {
        "cost": ev.cost,
        "max_eq": float(np.max(np.abs(ev.eq), initial=0.0)),
        "l1_eq": float(np.sum(np.abs(ev.eq))),
        "max_ineq": float(np.max(viol, initial=0.0)),
        "families": problem.family_summary(ev),
    }


# ---------------------------------------------------------------------------
# augmented Lagrangian
# ---------------------------------------------------------------------------

class _Merit:
    def __init__(self, problem, lam_e, lam_i, rho_e, rho_i):
        self.p = problem
        self.lam_e, self.lam_i, self.rho_e, self.rho_i = lam_e, lam_i, rho_e, rho_i

    def slack(self, g):
        return np.clip(g + self.lam_i / self.rho_i, self.p.ineq_lo, self.p.ineq_hi)

    def value(self, ev):
        c = ev.eq
        gs = ev.ineq - self.slack(ev.ineq)
        return (ev.cost + self.lam_e @ c + 0.5 * self.rho_e @ (c * c)
                + self.lam_i @ gs + 0.5 * self.rho_i @ (gs * gs))

    def gradient_and_hessian(self, ev, hessian=True):
        c = ev.eq
        g = ev.ineq
        s = self.slack(g)
        grad = ev.cost_gradient() + ev.eq_jac.T @ (self.lam_e + self.rho_e * c)
        grad += ev.ineq_jac.T @ (self.lam_i + self.rho_i * (g - s))
        if not hessian:
            return grad, None
        n = grad.size
        H = sp.csr_matrix((n, n))
        for t in ev.terms:
            if t.sign > 0:
                H = H + 2.0 * t.sign * (t.jacobian.T @ t.jacobian)
        H = H + ev.eq_jac.T @ sp.diags(self.rho_e) @ ev.eq_jac
        shifted = g + self.lam_i / self.rho_i
        act = (shifted < self.p.ineq_lo) | (shifted > self.p.ineq_hi)
        if np.any(act):
            Ja = ev.ineq_jac[np.flatnonzero(act)]
            H = H + Ja.T @ sp.diags(self.rho_i[act]) @ Ja
        return grad, H


def _solve_spd(H, rhs, damping):
    """Solve ``(H + damping * D) x = rhs`` with Marquardt scaling ``D``
    (the Hessian diagonal with a small floor); the damping grows until the
    factorization succeeds."""
    n = rhs.size
    diag = np.abs(H.diagonal())
    D = sp.diags(np.maximum(diag, 1e-12 * max(1.0, float(np.max(diag, initial=0.0)))))
    mu = damping
    for _ in range(12):
        try:
            A = (H + D * mu).tocsc()
            return spla.splu(A, permc_spec="COLAMD").solve(rhs)
        except RuntimeError:
            mu = max(mu * 100.0, 1e-10)
    raise RuntimeError("normal equations are singular")


def _least_squares_multipliers(problem, ev):
    """Multipliers minimizing the Lagrangian gradient norm, sign-corrected
    for inequality rows (zero on inactive rows)."""
    m_e, m_i = ev.eq.size, ev.ineq.size
    lam_e, lam_i = np.zeros(m_e), np.zeros(m_i)
    at_lo = np.abs(ev.ineq - problem.ineq_lo) <= 1e-9
    at_hi = np.abs(ev.ineq - problem.ineq_hi) <= 1e-9
    act = np.flatnonzero(at_lo | at_hi)
    J = sp.vstack([ev.eq_jac, ev.ineq_jac[act]], format="csr")
    if J.shape[0] == 0:
        return lam_e, lam_i
    grad = ev.cost_gradient()
    JJt = (J @ J.T).tocsc() + sp.identity(J.shape[0], format="csc") * 1e-10
    lam = spla.splu(JJt).solve(-(J @ grad))
    lam_e = lam[:m_e]
    lam_a = lam[m_e:]
    lam_a = np.where(at_lo[act], np.minimum(lam_a, 0.0), np.maximum(lam_a, 0.0))
    lam_i[act] = lam_a
    return lam_e, lam_i


def _violations(problem, ev):
    return np.abs(ev.eq), problem.ineq_violation(ev.ineq)


def _gn_hessian(ev, n):
    H = sp.csr_matrix((n, n))
    for t in ev.terms:
        if t.sign > 0:
            H = H + 2.0 * t.sign * (t.jacobian.T @ t.jacobian)
    return H


def _stationarity(ev, lam_e, lam_i):
    grad_f = ev.cost_gradient()
    grad_l = grad_f + ev.eq_jac.T @ lam_e + ev.ineq_jac.T @ lam_i
    scale = max(1.0, float(np.max(np.abs(grad_f), initial=0.0)))
    return float(np.max(np.abs(grad_l), initial=0.0)) / scale


def _worst(problem, ev, options):
    """Largest violation in units of the respective tolerance."""
    ve, vi = _violations(problem, ev)
    return max(ve.max(initial=0.0) / options.eq_tol, vi.max(initial=0.0) / options.ineq_tol)


def _kkt_step(problem, x, ev, merit, options):
    """One Gauss-Newton SQP step on the predicted active set.

    Solves ``[H J^T; J -eps I] [dx; y] = -[grad f; r]`` where ``r`` holds the
    equality residuals and the offsets of predicted-active inequality rows
    from their bounds, then backtracks on the constraint violation.  Returns
    ``(x, ev, lam_e, lam_i)`` or None when no step reduces the violation.
    """
    g, lo, hi = ev.ineq, problem.ineq_lo, problem.ineq_hi
    shifted = g + merit.lam_i / merit.rho_i
    act = (shifted < lo) | (shifted > hi) | (g < lo) | (g > hi)
    rows = np.flatnonzero(act)
    target = np.where(shifted < lo, lo, np.where(shifted > hi, hi, np.clip(g, lo, hi)))[rows]
    at_lo = target == lo[rows]
    J = sp.vstack([ev.eq_jac, ev.ineq_jac[rows]], format="csr")
    r = np.concatenate([ev.eq, g[rows] - target])
    n, m = problem.n_tangent, J.shape[0]
    grad_f = ev.cost_gradient()
    H = _gn_hessian(ev, n)
    delta = options.damping * max(1.0, float(np.max(np.abs(H.diagonal()), initial=0.0)))
    K = sp.bmat([[H + delta * sp.identity(n), J.T], [J, -options.kkt_regularization * sp.identity(m)]], format="csc")
    try:
        sol = spla.splu(K, permc_spec="COLAMD").solve(-np.concatenate([grad_f, r]))
    except RuntimeError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    dx, y = sol[:n], sol[n:]
    old = _worst(problem, ev, options)
    alpha = 1.0
    while alpha >= 1.0 / 64:
        x_new = problem.retract(x, alpha * dx)
        ev_new = problem.evaluate(x_new)
        new = _worst(problem, ev_new, options)
        if np.isfinite(new) and (new < old or new <= 1e-2):
            lam_e = y[:ev.eq.size]
            lam_i = np.zeros(g.size)
            y_a = y[ev.eq.size:]
            lam_i[rows] = np.where(at_lo, np.minimum(y_a, 0.0), np.maximum(y_a, 0.0))
            return x_new, ev_new, lam_e, lam_i
        alpha *= 0.5
    return None


def solve(problem: NlpProblem, options: SolverOptions | None = None, x0=None):
    """Solve ``problem`` from ``x0`` (default ``problem.x0``).

    Returns ``(problem.decode(x), SolveReport)``.  An exhausted iteration
    budget yields a report with ``not_converged`` set rather than raising.
    """
    options = options or SolverOptions()
    start = time.perf_counter()
    x = np.array(problem.x0 if x0 is None else x0, dtype=float)
    ev = problem.evaluate(x)
    if not (np.isfinite(ev.cost) and np.all(np.isfinite(ev.eq)) and np.all(np.isfinite(ev.ineq))):
        raise FloatingPointError("non-finite evaluation at the initial guess")
    m_e, m_i = ev.eq.size, ev.ineq.size
    lam_e, lam_i = _least_squares_multipliers(problem, ev)
    rho_e = np.full(m_e, options.penalty_init)
    rho_i = np.full(m_i, options.penalty_init)
    merit = _Merit(problem, lam_e, lam_i, rho_e, rho_i)

    history, inner_total = [], 0
    converged, message = False, "iteration budget exhausted"
    outer = 0
    stat = np.inf
    prev_e, prev_i = _violations(problem, ev)
    for outer in range(1, options.max_outer + 1):
        # -- inner damped Gauss-Newton on the augmented Lagrangian --------
        phi = merit.value(ev)
        damping = options.damping
        for _ in range(options.max_inner):
            grad, H = merit.gradient_and_hessian(ev)
            gscale = max(1.0, float(np.max(np.abs(ev.cost_gradient()), initial=0.0)))
            if np.max(np.abs(grad), initial=0.0) <= 0.1 * options.stationarity_tol * gscale:
                break
            inner_total += 1
            accepted = False
            for _attempt in range(6):
                d = -_solve_spd(H, grad, damping)
                slope = grad @ d
                alpha = 1.0
                while alpha > 1e-6:
                    x_try = problem.retract(x, alpha * d)
                    ev_try = problem.evaluate(x_try, derivatives=False)
                    phi_try = merit.value(ev_try) if np.isfinite(ev_try.cost) else np.inf
                    if np.isfinite(phi_try) and phi_try <= phi + 1e-4 * alpha * slope:
                        accepted = True
                        break
                    alpha *= 0.5
                if accepted:
                    break
                damping = max(damping * 100.0, 1e-6)
            if not accepted:
                break
            damping = max(options.damping, damping * 0.1)
            small = np.max(np.abs(alpha * d), initial=0.0) <= 1e-12 * (1 + np.max(np.abs(x)))
            x = x_try
            ev = problem.evaluate(x)
            decrease = phi - phi_try
            phi = phi_try
            log.debug("  inner: |g| %.3g alpha %.3g decrease %.3g damping %.1g",
                      np.max(np.abs(grad)), alpha, decrease, damping)
            if small or decrease <= 1e-14 * max(1.0, abs(phi)):
                break

        # -- multiplier and penalty updates ------------------------------
        c, g = ev.eq, ev.ineq
        s = merit.slack(g)
        merit.lam_e = merit.lam_e + merit.rho_e * c
        merit.lam_i = merit.lam_i + merit.rho_i * (g - s)
        ve, vi = _violations(problem, ev)
        max_e, max_i = ve.max(initial=0.0), vi.max(initial=0.0)
        stat = _stationarity(ev, merit.lam_e, merit.lam_i)

        if _worst(problem, ev, options) <= options.polish_threshold:
            for _ in range(options.polish_steps):
                if max_e <= options.eq_tol and max_i <= options.ineq_tol \
                        and stat <= options.stationarity_tol:
                    break
                step = _kkt_step(problem, x, ev, merit, options)
                if step is None:
                    break
                x, ev, lam_e, lam_i = step
                ve, vi = _violations(problem, ev)
                max_e, max_i = ve.max(initial=0.0), vi.max(initial=0.0)
                stat = _stationarity(ev, lam_e, lam_i)
                merit.lam_e, merit.lam_i = lam_e, lam_i
        history.append(float(max_e))
        log.debug("outer %d: cost %.6g eq %.3g ineq %.3g stat %.3g", outer, ev.cost, max_e, max_i, stat)

        if max_e <= options.eq_tol and max_i <= options.ineq_tol and stat <= options.stationarity_tol:
            converged = True
            message = "converged"
            break
        grow_e = (ve > options.eq_tol) & (ve > options.required_decrease * prev_e)
        grow_i = (vi > options.ineq_tol) & (vi > options.required_decrease * prev_i)
        merit.rho_e = np.where(grow_e, np.minimum(merit.rho_e * options.penalty_growth, options.penalty_max), merit.rho_e)
        merit.rho_i = np.where(grow_i, np.minimum(merit.rho_i * options.penalty_growth, options.penalty_max), merit.rho_i)
        prev_e, prev_i = ve, vi

    stats = residual_statistics(problem, x)
    report = SolveReport(
        iterations=outer, inner_iterations=inner_total, cost=stats["cost"],
        max_eq=stats["max_eq"], l1_eq=stats["l1_eq"], max_ineq=stats["max_ineq"],
        stationarity=float(stat), families=stats["families"], converged=converged,
        history=history, message=message, wall_time=time.perf_counter() - start)
    return problem.decode(x), report


# ---------------------------------------------------------------------------
# retargeting
# ---------------------------------------------------------------------------

def fit_configurations(model: RobotModel, keypoints, q_init=None, iterations: int = 30,
                       tol: float = 1e-12):
    """Per-frame least-squares fit of ``q`` to keypoint targets (F, K, 3).

    Each frame runs damped Gauss-Newton on the keypoint error, starting from
    the previous frame's solution; joint angles are kept inside their limits.
    The first frame starts from ``q_init`` or from the neutral pose moved
    onto the first keypoint.
    """
    keypoints = np.asarray(keypoints, dtype=float)
    lo, hi = model.position_limits
    if q_init is None:
        q = model.neutral_configuration()
        root = marker_positions(model, model.keypoints[:1], q)[0]
        q[:3] = keypoints[0, 0] - root
    else:
        q = np.array(q_init, dtype=float)
    out = np.empty((len(keypoints), model.nq))
    links = [k.link for k in model.keypoints]
    for i, target in enumerate(keypoints):
        for _ in range(iterations):
            poses = forward_kinematics(model, q)
            pts = marker_positions(model, model.keypoints, poses=poses)
            err = (pts - target).ravel()
            J = points_jacobian(model, poses, links, pts).reshape(-1, model.nv)
            A = J.T @ J
            step = np.linalg.solve(A + 1e-9 * (1.0 + np.trace(A)) * np.eye(model.nv), -J.T @ err)
            q = integrate_configuration(q, step)
            q[7:] = np.clip(q[7:], lo, hi)
            if np.max(np.abs(step)) < tol:
                break
        out[i] = q
    return out


def kinematic_seed(spec: ProblemSpec) -> KinodynamicTrajectory:
    q = fit_configurations(spec.model, spec.reference)
    return KinodynamicTrajectory(spec.dt, q, velocities_from_configurations(q, spec.dt))


def two_stage_retarget(spec: ProblemSpec, options: SolverOptions | None = None,
                       initial: KinodynamicTrajectory | None = None):
    """Kinematics-only solve seeded by the keypoint fit, then the full
    kinodynamic solve warm-started from it.

    Returns ``(trajectory, stage-1 report, stage-2 report)``.
    """
    options = options or SolverOptions()
    seed = kinematic_seed(spec) if initial is None else initial
    stage1 = build_problem(spec, "kinematics", seed)
    kin, rep1 = solve(stage1, options)
    stage2 = build_problem(spec, "full", seed_centroidal(spec, kin))
    traj, rep2 = solve(stage2, options)
    return traj, rep1, rep2


# ---------------------------------------------------------------------------
# torque verification
# ---------------------------------------------------------------------------

@dataclass
class TorqueViolation:
    knot: int
    joint: str
    torque: float
    limit: float
    excess: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TorqueReport:
    tau: np.ndarray            # (knots, n) joint torques
    base_wrench: np.ndarray    # (knots, 6) residual force (world) and moment (base)
    peak: np.ndarray           # (n,) max |tau| per joint
    violations: list
    joint_names: list

    @property
    def feasible(self) -> bool:
        return not self.violations

    def violated_joints(self) -> list[str]:
        return sorted({v.joint for v in self.violations}, key=self.joint_names.index)

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "peak": [float(a) for a in self.peak],
            "feasible": self.feasible,
            "violations": [v.as_dict() for v in self.violations],
            "tau": self.tau.tolist(),
            "base_wrench": self.base_wrench.tolist(),
        }


def joint_accelerations(v, dt: float) -> np.ndarray:
    """Central differences of ``v``; second-order one-sided at both ends."""
    v = np.asarray(v, dtype=float)
    if len(v) < 3:
        raise ValueError("torque verification needs at least three knots")
    a = np.empty_like(v)
    a[1:-1] = (v[2:] - v[:-2]) / (2 * dt)
    a[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * dt)
    a[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * dt)
    return a


def verify_torques(model: RobotModel, trajectory: KinodynamicTrajectory, gravity=GRAVITY,
                   limits=None, tol: float = 0.0) -> TorqueReport:
    """Full-body inverse dynamics along ``trajectory`` with its contact
    forces, checked against the joint torque limits (model limits unless
    ``limits=(lo, hi)`` is given)."""
    a = joint_accelerations(trajectory.v, trajectory.dt)
    forces = trajectory.f if trajectory.has_centroidal else None
    gen = inverse_dynamics(model, trajectory.q, trajectory.v, a, forces, gravity)
    tau = gen[:, 6:]
    lo, hi = model.torque_limits if limits is None else limits
    names = model.joint_names
    violations = []
    for k, j in zip(*np.nonzero((tau > hi + tol) | (tau < lo - tol))):
        t = float(tau[k, j])
        limit = float(hi[j] if t > hi[j] else lo[j])
        violations.append(TorqueViolation(int(k), names[j], t, limit, abs(t - limit)))
    peak = np.max(np.abs(tau), axis=0) if len(tau) else np.zeros(model.n_joints)
    return TorqueReport(tau, gen[:, :6], peak, violations, names)


# ---------------------------------------------------------------------------
# feasibility loop
# ---------------------------------------------------------------------------

def tighten_bounds(bounds, report: TorqueReport, limits, backoff: float = 0.9):
    """Scale the proxy bounds of every violated joint by ``limit / peak``
    times ``backoff``; other joints keep their bounds."""
    lo, hi = (np.array(b, dtype=float) for b in bounds)
    lim_lo, lim_hi = (np.asarray(b, dtype=float) for b in limits)
    for name in report.violated_joints():
        j = report.joint_names.index(name)
        limit = max(abs(lim_lo[j]), abs(lim_hi[j]))
        factor = limit / report.peak[j] * backoff
        lo[j] *= factor
        hi[j] *= factor
    return lo, hi


@dataclass
class FeasibilityResult:
    trajectory: KinodynamicTrajectory
    torques: TorqueReport
    rounds: int
    feasible: bool
    reports: list            # SolveReport per solve, in order
    bounds: list             # proxy bounds used in each round

    @property
    def not_converged(self) -> bool:
        return not self.feasible or any(r.not_converged for r in self.reports)


def retarget_until_feasible(spec: ProblemSpec, max_rounds: int = 3,
                            options: SolverOptions | None = None,
                            retarget=two_stage_retarget, verify=verify_torques) -> FeasibilityResult:
    """Alternate trajectory optimization and inverse-dynamics verification.

    Round 1 runs both stages; each later round tightens the proxy bounds of
    the joints that exceeded their limits (see :func:`tighten_bounds`) and
    re-solves the full stage warm-started from the previous trajectory.
    Stops at the first torque-feasible trajectory; after ``max_rounds`` the
    last result is returned with ``feasible`` False.

    The proxy only sees contact forces, so joints whose torque comes from
    their own inertia (the swing leg) cannot be fixed by tightening; such
    violations persist and end up flagged.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    options = options or SolverOptions()
    limits = spec.model.torque_limits
    bounds = spec.proxy_bounds()
    traj, rep1, rep2 = retarget(spec, options)
    reports = [rep1, rep2]
    used = [tuple(np.array(b, dtype=float) for b in bounds)]
    torques = verify(spec.model, traj)
    rounds = 1
    while not torques.feasible and rounds < max_rounds:
        bounds = tighten_bounds(bounds, torques, limits, options.backoff)
        log.info("round %d: tightening %s", rounds + 1, ", ".join(torques.violated_joints()))
        spec = replace(spec, torque_bounds=bounds)
        traj, rep = solve(build_problem(spec, "full", traj), options)
        reports.append(rep)
        used.append(bounds)
        torques = verify(spec.model, traj)
        rounds += 1
    return FeasibilityResult(traj, torques, rounds, torques.feasible, reports, used)
