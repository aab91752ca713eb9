import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinokick import imitation as im
from kinokick.kinodyn import integrate_configuration

from conftest import random_configuration

finite = st.floats(-50, 50, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@pytest.fixture
def state(kick_model, rng):
    q = random_configuration(kick_model, rng, 0.5)
    return q, rng.normal(size=kick_model.nv)


class TestRewardWeights:
    def test_defaults(self):
        w = im.RewardWeights()
        assert (w.w_k, w.w_q, w.w_v, w.w_c, w.w_ball) == (0.25, 0.25, 0.1, 0.25, 1.0)
        assert w.k_k == w.k_q == w.k_v == w.k_c == -2.0

    @pytest.mark.parametrize("field,value", [("w_k", -0.1), ("k_q", 0.0), ("k_c", 1.0), ("w_ball", np.nan)])
    def test_invalid(self, field, value):
        with pytest.raises(ValueError):
            im.RewardWeights(**{field: value})

    def test_round_trip(self):
        w = im.RewardWeights(w_k=0.5, k_v=-0.3)
        assert im.RewardWeights.from_dict(w.to_dict()) == w

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="w_x"):
            im.RewardWeights.from_dict({"w_x": 1})


class TestImitationReward:
    def test_zero_error_gives_weights(self, kick_model, state):
        w = im.RewardWeights()
        r = im.reward_imitation(state, state, kick_model, w)
        assert r.keypoint == w.w_k
        assert r.joint == w.w_q + w.w_v
        assert r.com == w.w_c
        assert r.total == pytest.approx(0.25 + 0.35 + 0.25)

    def test_unit_joint_error(self, kick_model, state):
        q, v = state
        q_ref = q.copy()
        q_ref[7 + kick_model.joint_index("r_knee")] += 1.0
        w = im.RewardWeights(w_q=1.0, k_q=-1.0)
        r = im.reward_imitation((q, v), (q_ref, v), kick_model, w)
        assert r.joint == pytest.approx(np.exp(-1.0) + w.w_v, rel=1e-12)

    def test_base_translation_errors(self, kick_model, state):
        # shifting the whole robot by d moves every keypoint and the CoM by d
        q, v = state
        q_ref = q.copy()
        q_ref[:3] += [0.3, 0.0, 0.4]
        err = im.tracking_errors(kick_model, (q, v), (q_ref, v))
        assert err["com"] == pytest.approx(0.5)
        assert err["keypoint"] == pytest.approx(0.5 * len(kick_model.keypoints))
        assert err["joint"] == pytest.approx(0.5)
        assert err["velocity"] == 0.0

    def test_decreases_with_error(self, kick_model, state):
        q, v = state
        totals = []
        for d in [0.0, 0.01, 0.1, 0.5]:
            dq = np.zeros(kick_model.nv)
            dq[6:] = d
            totals.append(im.reward_imitation((q, v), (integrate_configuration(q, dq), v), kick_model).total)
        assert all(a > b for a, b in zip(totals, totals[1:]))

    @settings(max_examples=1000, deadline=None)
    @given(st.dictionaries(st.sampled_from(["keypoint", "joint", "velocity", "com"]),
                           st.floats(0, 1e3), min_size=4, max_size=4),
           st.floats(0, 5), st.floats(-10, -1e-3))
    def test_components_bounded_by_weights(self, errors, w, k):
        weights = im.RewardWeights(w_k=w, w_q=w, w_v=w, w_c=w, k_k=k, k_q=k, k_v=k, k_c=k)
        r = im.reward_from_errors(errors, weights)
        assert 0 <= r.keypoint <= w and 0 <= r.com <= w and 0 <= r.joint <= 2 * w
        zero = im.reward_from_errors(dict.fromkeys(errors, 0.0), weights)
        assert (zero.keypoint, zero.joint, zero.com) == (w, 2 * w, w)


class TestBallReward:
    def test_examples(self):
        n = np.array([1.0, 0.0, 0.0])
        assert im.reward_ball([0.0, 3.0, 0.0], n) == 0.0
        assert im.reward_ball([np.log(2.0), 0.0, 0.0], n) == pytest.approx(1.0, rel=1e-14)
        assert im.reward_ball([-5.0, 0.0, 0.0], n) == 0.0
        assert im.reward_ball([1.0, 0.0, 0.0], n, w_ball=2.0) == pytest.approx(2 * (np.e - 1))

    def test_non_unit_direction(self):
        with pytest.raises(ValueError):
            im.reward_ball([1, 0, 0], [1.0, 1e-2, 0.0])

    @settings(max_examples=1000, deadline=None)
    @given(vec3, vec3.filter(lambda n: np.linalg.norm(n) > 1e-3))
    def test_zero_when_not_toward_target(self, v, n):
        n = unit(n)
        v = np.asarray(v)
        if v @ n > 0:
            v = v - 2 * (v @ n) * n
        assert im.reward_ball(v, n) == 0.0

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0, 10), vec3)
    def test_orthogonal_invariance(self, speed, extra):
        n = np.array([0.0, 0.6, 0.8])
        orth = np.asarray(extra) - (np.asarray(extra) @ n) * n
        a = im.reward_ball(speed * n, n)
        b = im.reward_ball(speed * n + orth, n)
        assert b == pytest.approx(a, rel=1e-9, abs=1e-12)

    def test_strictly_increasing(self):
        n = unit([1, 1, 0])
        r = [im.reward_ball(s * n, n) for s in np.linspace(0, 5, 20)]
        assert np.all(np.diff(r) > 0)


class TestPdTorque:
    def test_zero_error(self, kick_model):
        n = len(kick_model.joint_names)
        tau = im.pd_torque(np.ones(n), np.ones(n), np.zeros(n), 100.0, 5.0, kick_model)
        np.testing.assert_array_equal(tau, 0.0)

    def test_hip_clamp(self, kick_model):
        n = len(kick_model.joint_names)
        hip = kick_model.joint_index("r_hip_pitch")
        q_des = np.zeros(n)
        q_des[hip] = 1.0
        tau = im.pd_torque(q_des, np.zeros(n), np.zeros(n), 100.0, 0.0, kick_model)
        assert tau[hip] == 48.0
        assert np.count_nonzero(tau) == 1

    def test_linear_in_kp(self):
        q_des, q, v = np.array([0.1, -0.2]), np.zeros(2), np.array([0.3, 0.1])
        a = im.pd_torque(q_des, q, v, 10.0, 0.0)
        b = im.pd_torque(q_des, q, v, 20.0, 0.0)
        np.testing.assert_allclose(b, 2 * a)
        np.testing.assert_allclose(im.pd_torque(q_des, q, v, [10.0, 20.0], [1.0, 2.0]),
                                   [1.0 - 0.3, -4.0 - 0.2])

    def test_gain_mismatch(self):
        with pytest.raises(ValueError, match="k_p"):
            im.pd_torque(np.zeros(3), np.zeros(3), np.zeros(3), [1.0, 2.0], 0.0)
        with pytest.raises(ValueError):
            im.pd_torque(np.zeros(3), np.zeros(2), np.zeros(3), 1.0, 0.0)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(finite, min_size=10, max_size=10), st.floats(0, 1e3), st.floats(0, 1e2))
    def test_within_limits(self, err, kp, kd):
        from kinokick.model import shipped_model
        model = shipped_model("kick_leg")
        lo, hi = model.torque_limits
        e = np.asarray(err)
        tau = im.pd_torque(e, np.zeros(10), -e, kp, kd, model)
        assert np.all(tau >= lo) and np.all(tau <= hi)


class TestObservation:
    def reference(self, frames=60, nq=3, nv=2):
        q = np.arange(frames * nq, dtype=float).reshape(frames, nq)
        return q, -np.arange(frames * nv, dtype=float).reshape(frames, nv)

    def test_indices_at_30hz(self):
        np.testing.assert_array_equal(im.lookahead_indices(0.0, 30.0, 100), [1, 20, 40])

    def test_past_end_clamps(self):
        np.testing.assert_array_equal(im.lookahead_indices(5.0, 30.0, 60), [59, 59, 59])
        ref = self.reference()
        obs = im.assemble_observation(ref, 5.0, (np.zeros(3), np.zeros(2)), np.zeros(4), 30.0)
        last = np.concatenate([ref[0][-1], ref[1][-1]])
        np.testing.assert_array_equal(obs[:15], np.tile(last, 3))

    def test_layout(self):
        ref = self.reference()
        q, v, a = np.full(3, 7.0), np.full(2, 8.0), np.full(4, 9.0)
        obs = im.assemble_observation(ref, 0.0, (q, v), a, 30.0)
        assert obs.size == 3 * 5 + 5 + 4
        np.testing.assert_array_equal(obs[:5], np.concatenate([ref[0][1], ref[1][1]]))
        np.testing.assert_array_equal(obs[5:10], np.concatenate([ref[0][20], ref[1][20]]))
        np.testing.assert_array_equal(obs[15:], np.concatenate([q, v, a]))
        for t in [0.3, 1.0, 10.0]:
            assert im.assemble_observation(ref, t, (q, v), a, 30.0).size == obs.size

    def test_negative_time(self):
        with pytest.raises(ValueError):
            im.assemble_observation(self.reference(), -0.1, (np.zeros(3), np.zeros(2)), np.zeros(4), 30.0)


class TestRetThreshold:
    experiment = im.RetSchedule()

    def test_endpoints(self):
        assert im.ret_threshold(0, self.experiment) == 0.30
        assert im.ret_threshold(self.experiment.t_start - 1, self.experiment) == 0.30
        assert im.ret_threshold(self.experiment.t_end, self.experiment) == 0.10
        assert im.ret_threshold(5e9, self.experiment) == 0.10

    def test_two_stair_plateau(self):
        s = im.RetSchedule(d_max=0.3, d_min=0.1, t_start=0.0, t_end=2.0, n=2, gamma=50.0)
        # between the two stair centres (t = 1 and t = 2) one stair has been descended
        assert im.ret_threshold(1.5, s) == pytest.approx(0.2, abs=1e-3)
        # at the first stair centre the logistic is at its midpoint
        assert im.ret_threshold(1.0, s) == pytest.approx(0.25, abs=1e-3)

    def test_formula(self):
        s = im.RetSchedule(d_max=0.5, d_min=0.2, t_start=10.0, t_end=40.0, n=3, gamma=2.0)
        t = 23.0
        expect = 0.5 - sum(0.1 / (1 + np.exp(-2.0 * (t - (10 + i * 10)) / 10)) for i in (1, 2, 3))
        assert im.ret_threshold(t, s) == pytest.approx(expect, rel=1e-14)

    def test_vectorised(self):
        t = np.array([0.0, 6e8, 2e9])
        out = im.ret_threshold(t, self.experiment)
        np.testing.assert_allclose(out, [im.ret_threshold(x, self.experiment) for x in t])

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.01, 1.0), st.floats(0.1, 0.9), st.floats(0, 1e6), st.floats(1.0, 1e6),
           st.integers(1, 8), st.floats(0.1, 100))
    def test_monotone_and_bounded(self, d_max, frac, t_start, span, n, gamma):
        s = im.RetSchedule(d_max=d_max, d_min=d_max * frac, t_start=t_start, t_end=t_start + span,
                           n=n, gamma=gamma)
        t = np.linspace(0, t_start + 1.5 * span, 500)
        d = im.ret_threshold(t, s)
        assert np.all(np.diff(d) <= 1e-15)
        assert np.all(d <= s.d_max) and np.all(d >= s.d_min)

    @pytest.mark.parametrize("kw", [dict(d_min=0.4), dict(d_min=0.0), dict(t_end=1.0),
                                    dict(n=0), dict(gamma=0.0), dict(n=1.5)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            im.RetSchedule(**kw)


class TestTermination:
    def test_equal_state(self, kick_model, state):
        assert not im.should_terminate(state[0], state[0], kick_model, 1e-9)

    def test_offsets(self, kick_model, state):
        q = state[0]
        shifted = q.copy()
        shifted[0] += 0.31
        assert im.should_terminate(shifted, q, kick_model, 0.30)
        shifted[0] = q[0] + 0.05
        assert not im.should_terminate(shifted, q, kick_model, 0.10)

    def test_single_link(self, kick_model, state):
        # bending the knee moves only links below it
        q = state[0]
        bent = q.copy()
        bent[7 + kick_model.joint_index("r_knee")] += 0.5
        pelvis = kick_model.link_index("pelvis")
        shank = kick_model.tags["kick_chain"]["shank"]
        foot = kick_model.tags["kick_chain"]["foot"]
        assert im.max_link_deviation(bent, q, kick_model, [pelvis, shank]) == pytest.approx(0.0, abs=1e-12)
        assert im.max_link_deviation(bent, q, kick_model, [foot]) > 0.05

    def test_empty_links(self, kick_model, state):
        with pytest.raises(ValueError):
            im.should_terminate(state[0], state[0], kick_model, 0.1, links=[])

    def test_default_links(self, kick_model):
        links = im.default_termination_links(kick_model)
        assert links == sorted({k.link for k in kick_model.keypoints}) and links

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
    def test_monotone(self, seed, d1, d2):
        from kinokick.model import shipped_model
        model = shipped_model("kick_leg")
        rng = np.random.default_rng(seed)
        q = random_configuration(model, rng, 0.5)
        q2 = integrate_configuration(q, 0.2 * rng.normal(size=model.nv))
        links = im.default_termination_links(model)
        small, big = links[: len(links) // 2], links
        lo, hi = sorted([d1, d2])
        if im.should_terminate(q2, q, model, hi, small):
            assert im.should_terminate(q2, q, model, lo, small)
            assert im.should_terminate(q2, q, model, hi, big)


def test_config_document():
    w, s = im.config_from_dict({"weights": {"w_k": 0.5}, "ret_schedule": {"n": 2.0, "t_start": 0.0}})
    assert w.w_k == 0.5 and s.n == 2 and isinstance(s.n, int)
    assert im.config_from_dict({}) == (im.RewardWeights(), im.RetSchedule())
