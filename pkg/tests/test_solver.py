import numpy as np
import pytest

from kinokick import mocap, solver, synthetic
from kinokick.kinodyn import center_of_mass, marker_positions, integrate_configuration
from kinokick.model import load_model
from kinokick.solver import SolverOptions, TorqueReport, TorqueViolation, solve, verify_torques
from kinokick.transcription import (CostWeights, FunctionProblem, KinodynamicTrajectory, ProblemSpec,
                                    build_problem, static_forces)

from conftest import chain_document, random_configuration


# ---------------------------------------------------------------------------
# small test problems with dense oracles
# ---------------------------------------------------------------------------

def linear_problem(M, d, A=None, b=None, G=None, lo=None, hi=None, x0=None):
    """min ||M x - d||^2  s.t.  A x = b,  lo <= G x <= hi."""
    n = M.shape[1]
    eq = None if A is None else (lambda x: (A @ x - b, A))
    ineq = None if G is None else (lambda x: (G @ x, G))
    return FunctionProblem(np.zeros(n) if x0 is None else x0,
                           costs=[("fit", 1.0, lambda x: (M @ x - d, M))], eq=eq, ineq=ineq, lo=lo, hi=hi)


def kkt_solution(M, d, A, b):
    n, m = M.shape[1], A.shape[0]
    K = np.block([[2 * M.T @ M, A.T], [A, np.zeros((m, m))]])
    sol = np.linalg.solve(K, np.concatenate([2 * M.T @ d, b]))
    return sol[:n]


def random_qp(seed, n=6, m=2):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n + 2, n)), rng.normal(size=n + 2), rng.normal(size=(m, n)), rng.normal(size=m)


class TestSolve:
    @pytest.mark.parametrize("seed", range(3))
    def test_equality_qp_matches_kkt(self, seed):
        M, d, A, b = random_qp(seed)
        x, rep = solve(linear_problem(M, d, A, b), SolverOptions(eq_tol=1e-10, stationarity_tol=1e-10))
        assert rep.converged
        np.testing.assert_allclose(x, kkt_solution(M, d, A, b), atol=1e-6)

    def test_active_inequality(self):
        # unconstrained optimum x = (1, 2); the bound x0 + x1 <= 2 is active
        M, d = np.eye(2), np.array([1.0, 2.0])
        G = np.array([[1.0, 1.0]])
        x, rep = solve(linear_problem(M, d, G=G, lo=[-np.inf], hi=[2.0]),
                       SolverOptions(eq_tol=1e-10, ineq_tol=1e-10, stationarity_tol=1e-10))
        np.testing.assert_allclose(x, kkt_solution(M, d, G, np.array([2.0])), atol=1e-6)
        assert rep.max_ineq <= 1e-10

    def test_inactive_inequality(self):
        M, d = np.eye(2), np.array([1.0, 2.0])
        x, rep = solve(linear_problem(M, d, G=np.eye(2), lo=[-5, -5], hi=[5, 5]))
        np.testing.assert_allclose(x, d, atol=1e-8)

    def test_kkt_point_is_fixed(self):
        M, d, A, b = random_qp(7)
        x_star = kkt_solution(M, d, A, b)
        x, rep = solve(linear_problem(M, d, A, b, x0=x_star))
        assert rep.converged and rep.iterations <= 2
        np.testing.assert_allclose(x, x_star, atol=1e-8)

    def test_infeasible_pair_is_flagged(self):
        prob = FunctionProblem(np.array([3.0]), eq=lambda x: (np.array([x[0], x[0] - 1.0]), np.array([[1.0], [1.0]])))
        x, rep = solve(prob, SolverOptions(max_outer=15))
        assert rep.not_converged and not rep.converged
        assert rep.l1_eq == pytest.approx(1.0, abs=1e-6)
        assert rep.max_eq == pytest.approx(0.5, abs=1e-6)
        assert rep.message == "iteration budget exhausted"

    def test_nonfinite_start(self):
        prob = FunctionProblem(np.array([np.nan]), costs=[("c", 1.0, lambda x: (x, np.eye(1)))])
        with pytest.raises(FloatingPointError):
            solve(prob)

    @pytest.mark.parametrize("seed", range(5))
    def test_equality_history_monotone_on_convex(self, seed):
        M, d, A, b = random_qp(100 + seed, n=8, m=3)
        _, rep = solve(linear_problem(M, d, A, b), SolverOptions(eq_tol=1e-12, stationarity_tol=1e-12,
                                                                 max_outer=10))
        h = np.array(rep.history)
        assert len(h) >= 1 and np.all(np.diff(h) <= 1e-15)

    def test_nonlinear_circle(self):
        # closest point on the unit circle to (2, 1)
        prob = FunctionProblem(np.array([1.0, 0.0]),
                               costs=[("fit", 1.0, lambda x: (x - [2.0, 1.0], np.eye(2)))],
                               eq=lambda x: (np.array([x @ x - 1.0]), 2 * x[None]))
        x, rep = solve(prob, SolverOptions(eq_tol=1e-10, stationarity_tol=1e-10))
        np.testing.assert_allclose(x, np.array([2.0, 1.0]) / np.sqrt(5), atol=1e-7)

    def test_report_matches_recomputed_statistics(self):
        M, d, A, b = random_qp(3)
        G = np.ones((1, M.shape[1]))
        prob = linear_problem(M, d, A, b, G=G, lo=[-0.5], hi=[0.5])
        x, rep = solve(prob)
        stats = solver.residual_statistics(prob, x)
        for key in ("cost", "max_eq", "l1_eq", "max_ineq"):
            assert abs(stats[key] - getattr(rep, key)) <= 1e-12
        assert stats["families"] == rep.families

    def test_deterministic(self):
        M, d, A, b = random_qp(11)
        r1 = solve(linear_problem(M, d, A, b))[1].to_dict()
        r2 = solve(linear_problem(M, d, A, b))[1].to_dict()
        assert r1 == r2 and "wall_time" not in r1

    def test_options_round_trip(self):
        opts = SolverOptions(eq_tol=1e-6, max_outer=5)
        assert SolverOptions.from_dict(opts.as_dict()) == opts
        with pytest.raises(ValueError):
            SolverOptions.from_dict({"tolerance": 1})


# ---------------------------------------------------------------------------
# torque verification
# ---------------------------------------------------------------------------

def static_trajectory(q, n_knots=4, forces=None, dt=0.1):
    Q = np.repeat(q[None], n_knots, axis=0)
    traj = KinodynamicTrajectory(dt, Q, np.zeros((n_knots, len(q) - 1)))
    if forces is not None:
        traj.f = np.repeat(forces[None], n_knots, axis=0)
        z = np.zeros((n_knots, 3))
        traj.r, traj.rd, traj.rdd, traj.h, traj.hd = z, z, z, z, z
        traj.c = np.zeros_like(traj.f)
    return traj


def standing_pose(model):
    return synthetic.standing_configurations(model, 1)[0]


def balancing_forces(model, q):
    """Minimum-norm contact forces that balance gravity about the CoM."""
    from kinokick.rotations import skew
    c = marker_positions(model, model.contact_points, q)
    com = center_of_mass(model, q)
    n = len(c)
    A = np.zeros((6, 3 * n))
    for i in range(n):
        A[:3, 3 * i:3 * i + 3] = np.eye(3)
        A[3:, 3 * i:3 * i + 3] = skew(c[i] - com)
    w = np.concatenate([[0, 0, model.total_mass * 9.81], np.zeros(3)])
    return np.linalg.lstsq(A, w, rcond=None)[0].reshape(n, 3)


def tangent_derivative(fn, q, nv, h=1e-6):
    cols = []
    for i in range(nv):
        e = np.zeros(nv)
        e[i] = h
        cols.append((fn(integrate_configuration(q, e)) - fn(integrate_configuration(q, -e))) / (2 * h))
    return np.stack(cols, axis=-1)


class TestVerifyTorques:
    def test_gravity_compensation_oracle(self, kick_model):
        # static torques = dV/dq - sum_c (dp_c/dq)^T f_c, both by finite differences
        m = kick_model
        q = standing_pose(m)
        f = balancing_forces(m, q)
        rep = verify_torques(m, static_trajectory(q, forces=f))
        potential = lambda qq: np.array([m.total_mass * 9.81 * center_of_mass(m, qq)[2]])
        dV = tangent_derivative(potential, q, m.nv)[0]
        Jc = tangent_derivative(lambda qq: marker_positions(m, m.contact_points, qq).ravel(), q, m.nv)
        oracle = dV - Jc.T @ f.ravel()
        for k in range(4):
            np.testing.assert_allclose(rep.tau[k], oracle[6:], atol=1e-6)
        np.testing.assert_allclose(rep.base_wrench, 0.0, atol=1e-6)
        assert rep.feasible and rep.violations == []

    def test_hip_spike(self):
        # a horizontal point mass at 0.5 m needs m g L = 60 N m to hold
        doc = chain_document([0.5], [60.0 / (9.81 * 0.5)])
        doc["joints"][1]["name"] = "hip"
        model = load_model(doc)
        q = model.neutral_configuration()
        rep = verify_torques(model, static_trajectory(q))
        np.testing.assert_allclose(np.abs(rep.tau[:, 0]), 60.0, rtol=1e-12)
        assert len(rep.violations) == 4
        v = rep.violations[0]
        assert v.joint == "hip" and v.limit == pytest.approx(np.sign(v.torque) * 48.0)
        assert v.excess == pytest.approx(12.0, rel=1e-12)
        assert rep.violated_joints() == ["hip"] and not rep.feasible

    def test_violations_are_exactly_the_excess_entries(self, kick_model, rng):
        q = random_configuration(kick_model, rng, 0.5)
        traj = KinodynamicTrajectory(0.05, np.repeat(q[None], 5, 0), rng.normal(size=(5, kick_model.nv)) * 3)
        rep = verify_torques(kick_model, traj)
        lo, hi = kick_model.torque_limits
        expected = {(k, kick_model.joint_names[j]) for k, j in zip(*np.nonzero((rep.tau > hi) | (rep.tau < lo)))}
        assert {(v.knot, v.joint) for v in rep.violations} == expected

    def test_zero_gravity_rest(self, kick_model, rng):
        q = random_configuration(kick_model, rng)
        rep = verify_torques(kick_model, static_trajectory(q), gravity=np.zeros(3))
        np.testing.assert_array_equal(rep.tau, 0.0)

    def test_force_linearity(self, kick_model, rng):
        q = standing_pose(kick_model)
        f = rng.normal(size=(kick_model.n_contacts, 3)) * 50
        a = verify_torques(kick_model, static_trajectory(q, forces=f), gravity=np.zeros(3))
        b = verify_torques(kick_model, static_trajectory(q, forces=2 * f), gravity=np.zeros(3))
        np.testing.assert_array_equal(b.tau, 2 * a.tau)

    def test_accelerations_exact_on_quadratics(self):
        t = np.arange(6) * 0.1
        v = np.stack([3 * t ** 2 - t, 2 - t], axis=1)
        a = solver.joint_accelerations(v, 0.1)
        np.testing.assert_allclose(a, np.stack([6 * t - 1, -np.ones_like(t)], axis=1), atol=1e-10)
        with pytest.raises(ValueError):
            solver.joint_accelerations(v[:2], 0.1)


# ---------------------------------------------------------------------------
# feasibility loop
# ---------------------------------------------------------------------------

def torque_report(peak_hip, names=("hip", "knee")):
    tau = np.array([[peak_hip, 10.0]])
    viol = [TorqueViolation(0, "hip", peak_hip, 48.0, peak_hip - 48.0)] if peak_hip > 48 else []
    return TorqueReport(tau, np.zeros((1, 6)), np.abs(tau[0]), viol, list(names))


def test_tighten_bounds_rule():
    limits = (np.array([-48.0, -200.0]), np.array([48.0, 200.0]))
    lo, hi = solver.tighten_bounds(limits, torque_report(52.0), limits, 0.9)
    assert hi[0] == pytest.approx(48 * (48 / 52) * 0.9, rel=1e-15)
    assert lo[0] == pytest.approx(-48 * (48 / 52) * 0.9, rel=1e-15)
    np.testing.assert_array_equal([lo[1], hi[1]], [-200.0, 200.0])


@pytest.fixture(scope="module")
def standing_spec():
    from kinokick.model import shipped_model
    m = shipped_model("kick_leg")
    robot = mocap.rescale_to_robot(synthetic.standing_clip(m, n_frames=6), m)
    sched = mocap.detect_contacts(robot, model=m, require_swing=False)
    return ProblemSpec(m, mocap.keypoint_trajectory(robot, m), sched)


class TestFeasibilityLoop:
    def stub_retarget(self, calls):
        def retarget(spec, options):
            calls.append(spec)
            traj = static_trajectory(spec.model.neutral_configuration(), spec.n_knots)
            rep = solver.SolveReport(1, 1, 0.0, 0.0, 0.0, 0.0, 0.0, {}, True)
            return traj, rep, rep
        return retarget

    def hip_verify(self, peaks):
        def verify(model, traj):
            n = model.n_joints
            tau = np.zeros((1, n))
            hip = model.joint_index("r_hip_pitch")
            tau[0, hip] = peaks.pop(0)
            viol = [TorqueViolation(0, "r_hip_pitch", tau[0, hip], 48.0, tau[0, hip] - 48)] if tau[0, hip] > 48 else []
            return TorqueReport(tau, np.zeros((1, 6)), np.abs(tau[0]), viol, model.joint_names)
        return verify

    def test_feasible_first_round(self, standing_spec):
        calls = []
        res = solver.retarget_until_feasible(standing_spec, 3, retarget=self.stub_retarget(calls),
                                             verify=self.hip_verify([30.0]))
        assert res.rounds == 1 and res.feasible and len(calls) == 1 and not res.not_converged

    def test_single_round_flags_failure(self, standing_spec):
        res = solver.retarget_until_feasible(standing_spec, 1, retarget=self.stub_retarget([]),
                                             verify=self.hip_verify([52.0]))
        assert res.rounds == 1 and not res.feasible and res.not_converged
        assert [v.joint for v in res.torques.violations] == ["r_hip_pitch"]

    def test_second_round_uses_tightened_bound(self, standing_spec, monkeypatch):
        seen = []
        monkeypatch.setattr(solver, "build_problem", lambda spec, stage, traj: (seen.append(spec), traj)[1])
        monkeypatch.setattr(solver, "solve", lambda traj, options: (traj, solver.SolveReport(
            1, 1, 0.0, 0.0, 0.0, 0.0, 0.0, {}, True)))
        res = solver.retarget_until_feasible(standing_spec, 3, retarget=self.stub_retarget([]),
                                             verify=self.hip_verify([52.0, 40.0]))
        hip = standing_spec.model.joint_index("r_hip_pitch")
        assert res.rounds == 2 and res.feasible
        assert seen[0].torque_bounds[1][hip] == pytest.approx(48 * (48 / 52) * 0.9, rel=1e-12)
        assert len(res.bounds) == 2 and len(res.reports) == 3

    def test_zero_rounds_rejected(self, standing_spec):
        with pytest.raises(ValueError):
            solver.retarget_until_feasible(standing_spec, 0)


# ---------------------------------------------------------------------------
# two-stage pipeline on a standing clip
# ---------------------------------------------------------------------------

class TestTwoStage:
    def test_seed_forces_are_static(self, standing_spec):
        seed = solver.kinematic_seed(standing_spec)
        from kinokick.transcription import seed_centroidal
        full = seed_centroidal(standing_spec, seed)
        np.testing.assert_allclose(full.f.sum(axis=1)[:, 2], standing_spec.model.total_mass * 9.81, rtol=1e-12)
        np.testing.assert_array_equal(full.f, static_forces(standing_spec.model, standing_spec.schedule.active))

    def test_stage_one_pose_integration(self, standing_spec):
        opts = SolverOptions(eq_tol=1e-6)
        kin, rep = solve(build_problem(standing_spec, "kinematics", solver.kinematic_seed(standing_spec)), opts)
        assert rep.converged and rep.families["pose_integration"] <= 1e-6

    @pytest.mark.slow
    def test_standing_statics(self, standing_spec):
        # with a vanishing force regularization the optimum is static: the
        # contact forces carry the weight at every knot
        from dataclasses import replace
        spec = replace(standing_spec, weights=CostWeights(Q_f=1e-10))
        opts = SolverOptions(eq_tol=1e-9, ineq_tol=1e-9)
        traj, rep1, rep2 = solver.two_stage_retarget(spec, opts)
        assert rep1.converged and rep2.converged
        mg = spec.model.total_mass * 9.81
        np.testing.assert_allclose(traj.f.sum(axis=1)[:, 2], mg, rtol=1e-3)
        # tracking is barely touched by adding the dynamics
        shared = {t.name: t.value for t in build_problem(spec, "full", traj).evaluate(
            build_problem(spec, "full", traj).x0, derivatives=False).terms}
        assert shared["J_ref"] + shared["J_reg_v"] <= rep1.cost + 1e-6
        torques = verify_torques(spec.model, traj)
        assert torques.feasible
