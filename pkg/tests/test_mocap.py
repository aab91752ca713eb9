import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinokick import synthetic
from kinokick.kinodyn import marker_positions
from kinokick.mocap import (
    ContactSchedule,
    MocapClip,
    MocapError,
    contact_predicate,
    convert_clip,
    debounce,
    detect_contacts,
    keypoint_trajectory,
    read_clip,
    rescale_skeleton,
    rescale_to_robot,
    resample,
    write_clip,
)


def _chain_clip(frames, rate=120.0, **kw):
    frames = np.asarray(frames, dtype=float)
    J = frames.shape[1]
    return MocapClip(rate=rate, frames=frames, names=[f"j{i}" for i in range(J)],
                     parents=[-1] + list(range(J - 1)), **kw)


class TestResample:
    def test_horizon_count(self):
        clip = _chain_clip(np.zeros((445, 2, 3)))
        assert clip.duration == pytest.approx(3.7)
        assert resample(clip, 30.0).n_frames == 112

    def test_same_rate_identity(self, rng):
        clip = _chain_clip(rng.normal(size=(50, 3, 3)))
        out = resample(clip, 120.0)
        np.testing.assert_array_equal(out.frames, clip.frames)
        assert out.frames is not clip.frames

    def test_constant_clip(self):
        frames = np.tile(np.array([[0.1, 0.2, 0.3], [1.0, 2.0, 3.0]]), (97, 1, 1))
        for rate in (7.0, 30.0, 59.0):
            out = resample(_chain_clip(frames), rate)
            np.testing.assert_array_equal(out.frames, np.broadcast_to(frames[0], out.frames.shape))

    def test_linear_motion_exact(self):
        t = np.arange(241) / 120.0
        frames = np.stack([np.stack([t, 2 * t, -t], -1), np.stack([t ** 0, t, t], -1)], axis=1)
        out = resample(_chain_clip(frames), 30.0)
        tt = np.arange(out.n_frames) / 30.0
        np.testing.assert_allclose(out.frames[:, 0, 1], 2 * tt, atol=1e-12)
        np.testing.assert_allclose(out.frames[:, 1, 2], tt, atol=1e-12)

    @given(n=st.integers(2, 400), rate=st.sampled_from([60.0, 100.0, 120.0, 240.0]),
           target=st.floats(1.0, 60.0))
    @settings(max_examples=50, deadline=None)
    def test_duration_and_idempotence(self, n, rate, target):
        clip = _chain_clip(np.arange(n * 3, dtype=float).reshape(n, 1, 3), rate=rate)
        once = resample(clip, target)
        assert abs(once.duration - clip.duration) <= 1.0 / target + 1e-12
        twice = resample(once, target)
        np.testing.assert_array_equal(once.frames, twice.frames)

    def test_bad_rate(self):
        with pytest.raises(MocapError):
            resample(_chain_clip(np.zeros((3, 1, 3))), 0.0)


class TestClip:
    def test_invariants(self):
        with pytest.raises(MocapError):
            _chain_clip(np.zeros((3, 2, 2)))
        with pytest.raises(MocapError):
            _chain_clip(np.zeros((3, 2, 3)), rate=0.0)
        with pytest.raises(MocapError):
            _chain_clip(np.zeros((3, 2, 3)), correspondence={"nope": "x"})
        with pytest.raises(MocapError):
            MocapClip(rate=1.0, frames=np.zeros((2, 2, 3)), names=["a", "b"], parents=[-1, -1])


class TestRescale:
    def test_femur_two_thirds(self):
        hip = np.array([0.0, 0.0, 1.0])
        knee = hip + 0.45 * np.array([0.6, 0.0, -0.8])
        clip = _chain_clip(np.array([[hip, knee]]))
        out = rescale_skeleton(clip, [0.0, 0.30], 1.0)
        np.testing.assert_allclose(out.frames[0, 1], hip + (2 / 3) * (knee - hip), atol=1e-15)

    def test_uniform_half(self, rng):
        frames = np.cumsum(rng.normal(size=(20, 6, 3)), axis=1)
        clip = _chain_clip(frames)
        lengths = np.r_[0.0, np.linalg.norm(np.diff(frames[0], axis=0), axis=-1)]
        # bone lengths vary per frame in random data, so use the frame-0 lengths
        clip = rescale_skeleton(clip, lengths, 1.0)
        half = rescale_skeleton(clip, lengths * 0.5, 0.5)
        d = lambda f: np.linalg.norm(f[:, :, None] - f[:, None, :], axis=-1)
        np.testing.assert_allclose(d(half.frames), 0.5 * d(clip.frames), atol=1e-12)

    @given(seed=st.integers(0, 10_000), scale=st.floats(0.2, 3.0))
    @settings(max_examples=30, deadline=None)
    def test_directions_and_lengths(self, seed, scale):
        rng = np.random.default_rng(seed)
        J = 7
        parents = [-1] + [int(rng.integers(0, j)) for j in range(1, J)]
        frames = rng.normal(size=(5, J, 3))
        clip = MocapClip(rate=30.0, frames=frames, names=[str(i) for i in range(J)], parents=parents)
        lengths = rng.uniform(0.1, 1.0, size=J)
        out = rescale_skeleton(clip, lengths, scale)
        np.testing.assert_allclose(out.frames[:, 0], scale * frames[:, 0], atol=1e-12)
        for j, p in enumerate(parents):
            if p < 0:
                continue
            a = out.frames[:, j] - out.frames[:, p]
            b = frames[:, j] - frames[:, p]
            np.testing.assert_allclose(np.linalg.norm(a, axis=-1), lengths[j], atol=1e-9)
            np.testing.assert_allclose(a / lengths[j], b / np.linalg.norm(b, axis=-1, keepdims=True),
                                       atol=1e-9)

    def test_robot_identical_to_human(self, kick_model):
        qs = synthetic.kick_configurations(kick_model, n_frames=40)
        clip = synthetic.clip_from_configurations(kick_model, qs, 120.0, scale=1.0)
        out = rescale_to_robot(clip, kick_model)
        np.testing.assert_allclose(out.frames, clip.frames, atol=1e-12)

    def test_human_scale_recovers_robot(self, kick_model):
        qs = synthetic.kick_configurations(kick_model, n_frames=40)
        clip = synthetic.clip_from_configurations(kick_model, qs, 120.0)
        robot = keypoint_trajectory(rescale_to_robot(clip, kick_model), kick_model)
        np.testing.assert_allclose(robot, marker_positions(kick_model, kick_model.keypoints, qs),
                                   atol=1e-12)

    def test_missing_correspondence(self, kick_model):
        clip = synthetic.standing_clip(kick_model)
        corr = dict(clip.correspondence)
        corr.pop(clip.names[3])
        broken = MocapClip(clip.rate, clip.frames, clip.names, clip.parents, clip.offsets, corr, clip.feet)
        with pytest.raises(MocapError, match=clip.names[3]):
            rescale_to_robot(broken, kick_model)


def _gait_clip(liftoff=40, n=100, rate=100.0, shift=(0.0, 0.0)):
    """Left foot planted; right foot planted until ``liftoff`` then swings
    forward and up with peak forward speed at frame 70."""
    t = np.arange(n)
    left = np.zeros((n, 3))
    right = np.zeros((n, 3))
    right[:, 1] = -0.2
    s = np.clip((t - liftoff) / 60.0, 0.0, 1.0)
    right[:, 2] = 0.3 * np.sin(np.pi * s) * (t >= liftoff)
    right[:, 0] = 0.5 * (1 - np.cos(np.pi * np.clip((t - liftoff) / 60.0, 0, 1))) * (t >= liftoff)
    root = np.tile([0.0, -0.1, 0.8], (n, 1))
    frames = np.stack([root, left, right], axis=1) + np.r_[shift, 0.0]
    return MocapClip(rate=rate, frames=frames, names=["root", "lfoot", "rfoot"], parents=[-1, 0, 0],
                     feet={"left": ["lfoot"], "right": ["rfoot"]})


class TestContacts:
    def test_predicate(self):
        assert contact_predicate(0.005, 0.01, 0.02, 0.05)
        assert not contact_predicate(0.5, 0.0, 0.02, 0.05)
        assert not contact_predicate(0.5, 10.0, 0.02, 0.05)

    def test_liftoff_frame(self):
        clip = _gait_clip(liftoff=40)
        sched = detect_contacts(clip)
        assert abs(sched.timings.swing - 40 / clip.rate) <= 1 / clip.rate
        assert sched.timings.impact == pytest.approx(70 / clip.rate)
        assert sched.timings.lock == pytest.approx(sched.timings.impact - 0.1)
        assert sched.foot_active[:, 0].all()

    @given(dx=st.floats(-50, 50), dy=st.floats(-50, 50))
    @settings(max_examples=25, deadline=None)
    def test_horizontal_translation_invariance(self, dx, dy):
        base = detect_contacts(_gait_clip())
        moved = detect_contacts(_gait_clip(shift=(dx, dy)))
        np.testing.assert_array_equal(base.active, moved.active)
        assert base.timings.as_dict() == moved.timings.as_dict()

    def test_expand_to_model(self, kick_model):
        clip = synthetic.kick_clip(kick_model)
        sched = detect_contacts(resample(rescale_to_robot(clip, kick_model), 30.0), model=kick_model)
        assert sched.active.shape == (60, 10)
        feet = kick_model.tags["feet"]
        assert sched.active[:, feet["left"]].all()
        right = sched.active[:, feet["right"]]
        assert (right == right[:, :1]).all()
        assert right[0].all() and not right[-1].any()
        t = sched.timings
        assert 0 <= t.swing < t.lock < t.impact <= sched.times[-1]

    def test_standing_without_swing(self, kick_model):
        clip = synthetic.standing_clip(kick_model)
        with pytest.raises(MocapError, match="swing"):
            detect_contacts(clip, model=kick_model)
        sched = detect_contacts(clip, model=kick_model, require_swing=False)
        assert sched.active.all() and sched.timings is None
        assert not sched.swing_gate().any()

    def test_no_contact(self):
        n = 30
        t = np.arange(n)[:, None]
        frames = np.stack([t * [1.0, 0, 0] + [0, 0, 1], t * [1.0, 0, 0], t * [1.0, 0, 0]], axis=1)
        clip = MocapClip(rate=30.0, frames=frames, names=["r", "a", "b"], parents=[-1, 0, 0],
                         feet={"left": ["a"], "right": ["b"]})
        with pytest.raises(MocapError, match="no contact"):
            detect_contacts(clip)

    def test_thresholds_positive(self):
        with pytest.raises(MocapError):
            detect_contacts(_gait_clip(), height_threshold=0.0)

    def test_debounce(self):
        mask = np.array([1, 1, 1, 1, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0], bool)
        out = debounce(mask, 3)
        expected = np.array([1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], bool)
        np.testing.assert_array_equal(out, expected)

    def test_schedule_round_trip(self):
        sched = detect_contacts(_gait_clip())
        again = ContactSchedule.from_dict(sched.to_dict())
        np.testing.assert_array_equal(again.active, sched.active)
        assert again.timings.as_dict() == sched.timings.as_dict()
        assert again.dt == sched.dt

    def test_schedule_invariant(self):
        from kinokick.mocap import KickTimings

        with pytest.raises(MocapError):
            ContactSchedule(np.ones((10, 2)), 0.1, KickTimings(0.5, 0.4, 0.6))


class TestFiles:
    def test_csv_round_trip(self, tmp_path, kick_model):
        clip = synthetic.standing_clip(kick_model, n_frames=4)
        path, sidecar = write_clip(clip, tmp_path / "clip.csv")
        again = read_clip(path)
        np.testing.assert_array_equal(again.frames, clip.frames)
        assert again.names == clip.names and again.parents == clip.parents
        assert again.correspondence == clip.correspondence and again.feet == clip.feet
        np.testing.assert_array_equal(again.offsets, clip.offsets)
        assert sidecar.exists()

    def test_missing_file(self, tmp_path):
        with pytest.raises(MocapError, match="nope.csv"):
            read_clip(tmp_path / "nope.csv")

    def test_npz_and_unsupported(self, tmp_path):
        pos = np.zeros((3, 2, 3))
        pos[:, 1, 2] = 1.0
        np.savez(tmp_path / "c.npz", positions=pos, names=np.array(["a", "b"]),
                 parents=np.array([-1, 0]), rate=60.0)
        clip = convert_clip(tmp_path / "c.npz")
        assert clip.rate == 60.0 and clip.names == ["a", "b"]
        with pytest.raises(MocapError, match="unsupported"):
            convert_clip(tmp_path / "c.bvh")
