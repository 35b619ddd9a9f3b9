import math

import numpy as np
import pytest

from smap.motion import HUMAN23, ROBOT19, chain_skeleton, compute_stats, serialize_motion
from smap.synth import (
    ROBOT_DOMAIN_SALT,
    CorpusSpec,
    GaitSpec,
    default_corpus_spec,
    default_gait_classes,
    generate_corpus,
    generate_gait,
    label_histogram,
    read_corpus,
    sequence_seed,
    write_corpus,
)


def _flat(n, amp=1.0, freq=1.0, label="g", noise=0.0, speed=0.0):
    return GaitSpec(label, freq, (amp,) * n, (0.0,) * n, noise, speed)


def test_quarter_period_samples():
    seq = generate_gait(chain_skeleton(1), _flat(1), frames=4, dt=0.25, seed=0)
    np.testing.assert_allclose(seq.frames[:, 0], [0.0, 1.0, 0.0, -1.0], atol=1e-12)


def test_zero_amplitude_is_constant():
    seq = generate_gait(chain_skeleton(3), _flat(3, amp=0.0, label="idle"), 10, 0.1, 5)
    assert seq.label == "idle"
    assert not seq.frames.any()


def test_root_velocity_rows():
    seq = generate_gait(chain_skeleton(2), _flat(2, speed=1.25), 7, 0.1, 0)
    np.testing.assert_array_equal(seq.root_velocity, np.tile([1.25, 0.0, 0.0], (7, 1)))


def test_phase_offset_shifts_cycle():
    spec = GaitSpec("g", 1.0, (1.0,), (0.25,))
    seq = generate_gait(chain_skeleton(1), spec, 1, 0.1, 0)
    assert seq.frames[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_clamped_into_limits():
    skel = chain_skeleton(2)
    seq = generate_gait(skel, _flat(2, amp=3.0, noise=1.0), 200, 0.01, 3)
    assert np.all(seq.frames <= skel.q_max) and np.all(seq.frames >= skel.q_min)


def test_frames_zero_rejected():
    with pytest.raises(ValueError):
        generate_gait(chain_skeleton(1), _flat(1), 0, 0.1, 0)


def test_bad_gait_specs():
    with pytest.raises(ValueError):
        GaitSpec("g", 0.0, (1.0,), (0.0,))
    with pytest.raises(ValueError):
        GaitSpec("g", 1.0, (1.0,), (1.0,))
    with pytest.raises(ValueError):
        generate_gait(chain_skeleton(2), _flat(3), 4, 0.1, 0)


def test_same_seed_gives_identical_file():
    g = _flat(4, amp=0.5, noise=0.05)
    a = serialize_motion(generate_gait(chain_skeleton(4), g, 60, 0.02, 99))
    b = serialize_motion(generate_gait(chain_skeleton(4), g, 60, 0.02, 99))
    c = serialize_motion(generate_gait(chain_skeleton(4), g, 60, 0.02, 100))
    assert a == b
    assert a != c


def test_noiseless_signal_is_periodic():
    dt, f = 1 / 30, 1.5
    g = GaitSpec("g", f, (0.4, 0.7), (0.0, 0.3))
    seq = generate_gait(chain_skeleton(2), g, 120, dt, 0)
    period = round(1 / (f * dt))  # 20 frames
    np.testing.assert_allclose(seq.frames[period:], seq.frames[:-period], atol=1e-12)


def test_counter_seed_scheme():
    assert sequence_seed(0, 0, 0) == 0
    assert sequence_seed(5, 2, 3) == 5 ^ (2 << 40) ^ (3 << 20)
    assert sequence_seed(-1, 0, 0) == (1 << 64) - 1


def _three_class_spec(seed=0, per=4):
    classes = tuple(
        (_flat(23, amp=0.02 * (i + 1), freq=1.0 + i, label=f"c{i + 1}", noise=0.01),
         _flat(19, amp=0.01 * (i + 1), freq=1.0 + i, label=f"c{i + 1}", noise=0.01))
        for i in range(3)
    )
    return CorpusSpec(HUMAN23, ROBOT19, classes, per, 30, 1 / 30, seed)


def test_corpus_counts_and_channels():
    h, r = generate_corpus(_three_class_spec())
    assert len(h) == 12 and len(r) == 12
    assert label_histogram(h) == {"c1": 4, "c2": 4, "c3": 4}
    assert label_histogram(r) == {"c1": 4, "c2": 4, "c3": 4}
    assert {s.n_channels for s in h} == {23}
    assert {s.n_channels for s in r} == {19}


def test_corpus_pairs_share_labels():
    h, r = generate_corpus(default_corpus_spec(seed=1, sequences_per_class=2, frames=20))
    assert [s.label for s in h] == [s.label for s in r]


def test_corpus_uses_per_sequence_seeds():
    spec = _three_class_spec(seed=42, per=2)
    h, r = generate_corpus(spec)
    again = generate_gait(HUMAN23, spec.gait_classes[1][0], spec.frames, spec.dt, sequence_seed(42, 1, 1))
    np.testing.assert_array_equal(h[3].frames, again.frames)
    again_r = generate_gait(ROBOT19, spec.gait_classes[1][1], spec.frames, spec.dt,
                            sequence_seed(42, 1, 1) ^ ROBOT_DOMAIN_SALT)
    np.testing.assert_array_equal(r[3].frames, again_r.frames)


def test_corpus_regeneration_gives_identical_stats():
    spec = default_corpus_spec(seed=17, sequences_per_class=3, frames=60)
    h1, r1 = generate_corpus(spec)
    h2, r2 = generate_corpus(spec)
    for a, b in ((h1, h2), (r1, r2)):
        sa, sb = compute_stats(a), compute_stats(b)
        assert np.array_equal(sa.mean, sb.mean) and np.array_equal(sa.std, sb.std)


def test_corpus_errors():
    single = _three_class_spec()
    with pytest.raises(ValueError, match="two gait classes"):
        generate_corpus(CorpusSpec(HUMAN23, ROBOT19, single.gait_classes[:1]))
    dup = (single.gait_classes[0], single.gait_classes[0])
    with pytest.raises(ValueError, match="duplicate"):
        generate_corpus(CorpusSpec(HUMAN23, ROBOT19, dup))
    bad = ((single.gait_classes[0][0], single.gait_classes[1][1]), single.gait_classes[2])
    with pytest.raises(ValueError, match="mismatched"):
        generate_corpus(CorpusSpec(HUMAN23, ROBOT19, bad))


def test_default_classes_fit_joint_limits():
    for gh, gr in default_gait_classes():
        assert gh.label == gr.label
        assert len(gh.amplitude) == 23 and len(gr.amplitude) == 19
        # robot patterns stay within the toy actuator's acceleration budget
        peak = max(a * (2 * math.pi * gr.base_frequency) ** 2 for a in gr.amplitude)
        assert peak <= 26.0


def test_write_and_read_corpus(tmp_path):
    spec = default_corpus_spec(seed=3, sequences_per_class=2, frames=12)
    manifest = write_corpus(spec, tmp_path)
    assert (tmp_path / "human" / "walk_1.smap").exists()
    assert (tmp_path / "robot" / "squat_0.smap").exists()
    assert len(manifest["files"]) == 16
    h, r = read_corpus(tmp_path)
    h0, r0 = generate_corpus(spec)
    assert [s.label for s in h] == [s.label for s in h0]
    np.testing.assert_allclose(r[5].frames, r0[5].frames, rtol=1e-8)
