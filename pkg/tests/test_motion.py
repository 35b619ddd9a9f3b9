import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smap.motion import (
    HUMAN23,
    ROBOT19,
    ChannelCountMismatchError,
    ChannelStats,
    FrameCountMismatchError,
    MalformedHeaderError,
    MotionSequence,
    NonFiniteValueError,
    Skeleton,
    chain_skeleton,
    compute_stats,
    denormalize,
    format_value,
    forward_kinematics,
    normalize,
    parse_motion,
    serialize_motion,
)


def _doc(frames, channels, rows, extra=""):
    head = f"#SMAP-MOTION v1; skeleton=chain{channels}; dt=0.02; channels={channels}; frames={frames}{extra}"
    return "\n".join([head] + rows) + "\n"


def _random_seq(rng, skeleton, frames, with_root=True):
    q = rng.uniform(skeleton.q_min, skeleton.q_max, size=(frames, skeleton.n_dof))
    rv = rng.normal(size=(frames, 3)) if with_root else None
    return MotionSequence(skeleton, float(rng.uniform(0.005, 0.1)), q, "walk", rv)


class TestParse:
    def test_minimal_document(self):
        seq = parse_motion(_doc(2, 3, ["0 1 2", "3 4 5"]))
        assert seq.frames.shape == (2, 3)
        assert seq.frames[1, 2] == 5.0
        assert seq.label is None and seq.root_velocity is None

    def test_frame_count_mismatch(self):
        with pytest.raises(FrameCountMismatchError) as err:
            parse_motion(_doc(2, 3, ["0 1 2"]))
        assert "frame-count mismatch" in str(err.value)

    def test_channel_count_mismatch_names_line(self):
        with pytest.raises(ChannelCountMismatchError) as err:
            parse_motion(_doc(2, 3, ["0 1 2", "3 4"]))
        assert err.value.line == 3

    def test_non_finite_value_names_column(self):
        with pytest.raises(NonFiniteValueError) as err:
            parse_motion(_doc(1, 3, ["0 nan 2"]))
        assert err.value.line == 2
        assert err.value.column == 3  # character offset of the token

    @pytest.mark.parametrize("header", [
        "#SMAP-MOTION v2; skeleton=chain1; dt=0.02; channels=1; frames=1",
        "#SMAP-MOTION v1; skeleton=chain1; channels=1; frames=1",
        "#SMAP-MOTION v1; skeleton=chain1; dt=-1; channels=1; frames=1",
        "SMAP v1",
    ])
    def test_malformed_header(self, header):
        with pytest.raises(MalformedHeaderError):
            parse_motion(header + "\n0\n")

    def test_error_kinds_are_distinct(self):
        kinds = {MalformedHeaderError, FrameCountMismatchError, NonFiniteValueError, ChannelCountMismatchError}
        assert len(kinds) == 4
        for a in kinds:
            for b in kinds - {a}:
                assert not issubclass(a, b)

    def test_rootvel_block_and_label(self):
        text = _doc(2, 1, ["0.5", "1.5", "#ROOTVEL", "1 0 0", "1 0 0.25"], "; label=wave")
        seq = parse_motion(text)
        assert seq.label == "wave"
        np.testing.assert_array_equal(seq.root_velocity[1], [1.0, 0.0, 0.25])


class TestSerialize:
    def test_single_zero_value(self):
        seq = MotionSequence(chain_skeleton(1), 0.02, [[0.0]])
        lines = serialize_motion(seq).split("\n")
        assert lines[1] == "0.000000000"

    def test_dt_in_header(self):
        seq = MotionSequence(chain_skeleton(2), 0.02, np.zeros((3, 2)))
        assert "dt=0.02" in serialize_motion(seq).split("\n")[0]

    def test_lf_endings(self):
        seq = MotionSequence(chain_skeleton(2), 0.02, np.ones((3, 2)))
        assert "\r" not in serialize_motion(seq)

    def test_format_value_nine_significant(self):
        assert format_value(1 / 3) == "0.333333333"
        assert format_value(-12345.6789012) == "-12345.6789"
        assert format_value(1.0) == "1.00000000"

    def test_round_trip_100_random(self):
        rng = np.random.default_rng(7)
        for i in range(100):
            skel = ROBOT19 if i % 2 else HUMAN23
            seq = _random_seq(rng, skel, int(rng.integers(1, 80)), with_root=bool(i % 3))
            doc = serialize_motion(seq)
            back = parse_motion(doc)
            np.testing.assert_allclose(back.frames, seq.frames, rtol=5e-9, atol=1e-300)
            assert serialize_motion(back) == doc
            assert back.label == seq.label and back.skeleton == seq.skeleton

    def test_gait_file_is_byte_stable(self):
        rng = np.random.default_rng(11)
        doc = serialize_motion(_random_seq(rng, ROBOT19, 60))
        assert serialize_motion(parse_motion(doc)) == doc


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=12))
def test_round_trip_property(values):
    seq = MotionSequence(chain_skeleton(1), 0.01, np.array(values)[:, None])
    back = parse_motion(serialize_motion(seq))
    for a, b in zip(back.frames[:, 0], seq.frames[:, 0]):
        assert a == pytest.approx(b, rel=1e-8, abs=1e-300)


class TestStats:
    def test_zero_sequence_floors_std(self):
        st_ = compute_stats([MotionSequence(chain_skeleton(2), 0.1, np.zeros((4, 2)))])
        np.testing.assert_array_equal(st_.mean, 0.0)
        np.testing.assert_array_equal(st_.std, 1e-6)

    def test_population_std(self):
        st_ = compute_stats([MotionSequence(chain_skeleton(1), 0.1, [[0.0], [2.0]])])
        assert st_.mean[0] == 1.0 and st_.std[0] == 1.0

    def test_two_pass_oracle(self):
        rng = np.random.default_rng(3)
        data = [_random_seq(rng, ROBOT19, int(rng.integers(5, 40))) for _ in range(50)]
        st_ = compute_stats(data)
        rows = [row for s in data for row in s.frames]
        n = len(rows)
        for c in range(ROBOT19.n_dof):
            mean = math.fsum(r[c] for r in rows) / n
            var = math.fsum((r[c] - mean) ** 2 for r in rows) / n
            assert abs(st_.mean[c] - mean) < 1e-12
            assert abs(st_.std[c] - max(math.sqrt(var), 1e-6)) < 1e-12

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            compute_stats([])

    def test_mixed_skeletons_rejected(self):
        a = MotionSequence(chain_skeleton(2), 0.1, np.zeros((2, 2)))
        b = MotionSequence(chain_skeleton(3), 0.1, np.zeros((2, 3)))
        with pytest.raises(ValueError):
            compute_stats([a, b])


class TestNormalize:
    def test_identity_stats(self):
        seq = MotionSequence(chain_skeleton(2), 0.1, np.zeros((3, 2)))
        out = normalize(seq, ChannelStats(np.zeros(2), np.ones(2)))
        np.testing.assert_array_equal(out.frames, seq.frames)

    def test_scalar_example(self):
        seq = MotionSequence(chain_skeleton(1), 0.1, [[3.0]])
        assert normalize(seq, ChannelStats([1.0], [2.0])).frames[0, 0] == 1.0

    def test_round_trip(self):
        rng = np.random.default_rng(5)
        seq = _random_seq(rng, HUMAN23, 50)
        stats = ChannelStats(rng.normal(size=23), rng.uniform(1e-6, 3.0, size=23))
        back = denormalize(normalize(seq, stats), stats)
        assert np.max(np.abs(back.frames - seq.frames)) < 1e-10

    def test_dimension_mismatch(self):
        seq = MotionSequence(chain_skeleton(2), 0.1, np.zeros((3, 2)))
        with pytest.raises(ValueError):
            normalize(seq, ChannelStats(np.zeros(3), np.ones(3)))


def _fk_oracle(skeleton, q):
    # independent: accumulate absolute angles as unit complex numbers, root to leaf
    out = {}
    def place(j):
        if j in out:
            return out[j]
        p = int(skeleton.parent[j])
        base_pos, base_rot = (0j, 1 + 0j) if p < 0 else place(p)
        rot = base_rot * cmath.exp(1j * q[j])
        out[j] = (base_pos + skeleton.link_length[j] * rot, rot)
        return out[j]
    pts = [place(j)[0] for j in range(skeleton.n_dof)]
    return np.array([[z.real, z.imag] for z in pts])


class TestForwardKinematics:
    def test_straight_chain(self):
        kp = forward_kinematics(chain_skeleton(2), [0.0, 0.0])
        np.testing.assert_array_equal(kp, [[1.0, 0.0], [2.0, 0.0]])

    def test_quarter_turn(self):
        kp = forward_kinematics(chain_skeleton(1), [math.pi / 2])
        assert np.max(np.abs(kp[0] - [0.0, 1.0])) < 1e-12

    def test_random_tree_vs_complex_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            parent = [-1] + [int(rng.integers(0, j)) for j in range(1, 5)]
            skel = Skeleton("tree5", parent, rng.uniform(0.1, 2.0, 5), -np.full(5, 4.0), np.full(5, 4.0),
                            np.zeros(5, bool))
            q = rng.uniform(-3, 3, 5)
            assert np.max(np.abs(forward_kinematics(skel, q) - _fk_oracle(skel, q))) < 1e-10

    def test_batched_matches_single(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(4, ROBOT19.n_dof))
        batched = forward_kinematics(ROBOT19, q)
        for i in range(4):
            np.testing.assert_allclose(batched[i], forward_kinematics(ROBOT19, q[i]), atol=0)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            forward_kinematics(ROBOT19, np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.floats(-math.pi, math.pi), st.integers(0, 2**32 - 1))
def test_root_rotation_equivariance(delta, seed):
    rng = np.random.default_rng(seed)
    q = rng.uniform(-1, 1, ROBOT19.n_dof)
    roots = np.flatnonzero(ROBOT19.parent == -1)
    shifted = q.copy()
    shifted[roots] += delta
    c, s = math.cos(delta), math.sin(delta)
    rotated = forward_kinematics(ROBOT19, q) @ np.array([[c, s], [-s, c]])
    assert np.max(np.abs(forward_kinematics(ROBOT19, shifted) - rotated)) < 1e-10


class TestSkeletonInvariants:
    def test_cycle_rejected(self):
        with pytest.raises(ValueError):
            Skeleton("cyc", [1, 0], [1, 1], [-1, -1], [1, 1], [False, False])

    def test_limits_ordered(self):
        with pytest.raises(ValueError):
            Skeleton("bad", [-1], [1], [1.0], [1.0], [False])

    def test_mask_length(self):
        with pytest.raises(ValueError):
            Skeleton("bad", [-1, 0], [1, 1], [-1, -1], [1, 1], [False])

    def test_default_skeletons(self):
        assert HUMAN23.n_dof == 23 and ROBOT19.n_dof == 19
        for sk in (HUMAN23, ROBOT19):
            assert sk.upper_mask.any() and sk.lower_mask.any()
            assert sk.hip_mask.any() and sk.ankle_mask.any()
