import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smap import adapter as A
from smap import nn
from smap.motion import HUMAN23, ROBOT19, MotionSequence
from smap.synth import GaitSpec, generate_gait


def tiny_model(seed=3, **kw):
    cfg = A.AdapterConfig(window=8, latent=2, hidden=4, amp_hidden=4, codebook_size=4, seed=seed, **kw)
    return A.init_model(cfg, HUMAN23, ROBOT19, 1 / 30)


def small_model(seed=0, **kw):
    cfg = A.AdapterConfig(window=16, stride=8, latent=3, hidden=8, amp_hidden=8, codebook_size=8, seed=seed, **kw)
    return A.init_model(cfg, HUMAN23, ROBOT19, 1 / 30)


# ---------------------------------------------------------------------------
# quantizer


class TestQuantize:
    def test_nearest_entry(self):
        cb = A.Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
        q, idx = A.quantize(np.array([0.9, 0.8]), cb)
        assert idx == 1
        np.testing.assert_array_equal(q, [1.0, 1.0])

    def test_midpoint_goes_to_lower_index(self):
        cb = A.Codebook(np.array([[2.0, 0.0], [0.0, 0.0], [0.0, 2.0]]))
        _, idx = A.quantize(np.array([1.0, 1.0]), cb)
        assert idx == 0

    def test_batch_vs_exhaustive_scan(self):
        rng = np.random.default_rng(0)
        cb = A.Codebook(rng.normal(size=(16, 6)))
        x = rng.normal(size=(500, 6))
        _, idx = A.quantize(x, cb)
        for row, got in zip(x, idx):
            best, best_d = None, math.inf
            for i, e in enumerate(cb.entries):
                d = math.fsum((a - b) ** 2 for a, b in zip(row, e))
                if d < best_d:
                    best, best_d = i, d
            assert got == best

    def test_wrong_dimension(self):
        with pytest.raises(ValueError):
            A.quantize(np.zeros(3), A.Codebook(np.zeros((2, 4))))

    def test_straight_through_gradient(self):
        raw = nn.Tensor(np.array([[0.2, -0.4]]), requires_grad=True)
        out = A.straight_through(raw, np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(out.data, [[1.0, 1.0]])
        (out * np.array([[3.0, 5.0]])).sum().backward()
        np.testing.assert_array_equal(raw.grad, [[3.0, 5.0]])

    def test_ema_update_moves_used_entry(self):
        cb = A.Codebook(np.zeros((3, 2)))
        cb.ema_update(np.array([[1.0, 1.0], [3.0, 3.0]]), np.array([1, 1]), decay=0.5)
        np.testing.assert_allclose(cb.entries[1], [1.0, 1.0])
        assert not cb.entries[[0, 2]].any()
        assert cb.usage[1] > cb.usage[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_quantize_oracle_property(n, dim, seed):
    rng = np.random.default_rng(seed)
    # a coarse grid makes exact ties frequent
    cb = A.Codebook(rng.integers(-2, 3, size=(n, dim)).astype(float))
    x = rng.integers(-2, 3, size=(50, dim)).astype(float) / 2
    _, idx = A.quantize(x, cb)
    d = ((x[:, None, :] - cb.entries[None]) ** 2).sum(-1)
    want = [int(np.flatnonzero(row == row.min())[0]) for row in d]
    assert idx.tolist() == want


# ---------------------------------------------------------------------------
# phase embedding


class TestEmbedding:
    def test_zero_phase_gives_a1(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 8))
        P = A.extrapolate_and_embed(a, np.zeros((5, 4)), rng.uniform(0, 3, (5, 4)), np.zeros(1)).data
        np.testing.assert_array_equal(P[:, :, 0], a[:, 4:])

    def test_quarter_phase_gives_a0(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 8))
        P = A.extrapolate_and_embed(a, np.full((5, 4), 0.25), np.zeros((5, 4)), np.zeros(1)).data
        np.testing.assert_allclose(P[:, :, 0], a[:, :4], rtol=0, atol=1e-15)

    def test_general_formula(self):
        rng = np.random.default_rng(3)
        a, ph, f = rng.normal(size=(2, 6)), rng.uniform(0, 1, (2, 3)), rng.uniform(0, 2, (2, 3))
        T = A.relative_times(7, 0.05)
        P = A.extrapolate_and_embed(a, ph, f, T).data
        for b in range(2):
            for j in range(3):
                for t in range(7):
                    phi = ph[b, j] + f[b, j] * T[t]
                    want = a[b, j] * math.sin(2 * math.pi * phi) + a[b, 3 + j] * math.cos(2 * math.pi * phi)
                    assert P[b, j, t] == pytest.approx(want, abs=1e-12)

    def test_relative_times_centred(self):
        T = A.relative_times(5, 0.1)
        np.testing.assert_allclose(T, [-0.2, -0.1, 0.0, 0.1, 0.2])
        assert A.relative_times(4, 1.0).sum() == 0.0


# ---------------------------------------------------------------------------
# encoder / decoder


class TestEncodeDecode:
    def test_zero_window_is_finite_and_deterministic(self):
        m = small_model()
        z = np.zeros((1, 23, 16))
        e1, e2 = A.encode(m, "h", z), A.encode(m, "h", z)
        for t in (e1.alpha_raw, e1.phase, e1.freq):
            assert np.all(np.isfinite(t.data))
        np.testing.assert_array_equal(e1.alpha_raw.data, e2.alpha_raw.data)
        np.testing.assert_array_equal(e1.phase.data, e2.phase.data)

    def test_wrong_channel_count(self):
        with pytest.raises(ValueError):
            A.encode(small_model(), "r", np.zeros((1, 23, 16)))

    def test_phase_in_unit_interval(self):
        rng = np.random.default_rng(4)
        m = small_model()
        enc = A.encode(m, "h", rng.normal(size=(64, 23, 16)))
        assert np.all(enc.phase.data >= 0.0) and np.all(enc.phase.data < 1.0)
        assert np.all(enc.freq.data >= 0.0)

    def test_timing_recovers_a_known_tone(self):
        dt, W = 1 / 30, 60
        t = np.arange(W) * dt
        sig = np.sin(2 * math.pi * (1.3 * t + 0.1))[None, None, :]
        freq, phase, _ = A.estimate_timing(nn.Tensor(sig), dt)
        assert freq.data[0, 0] == pytest.approx(1.3, rel=0.02)

    def test_zero_embedding_decodes_to_constant(self):
        m = small_model()
        out = A.decode(m, "r", np.zeros((1, 3, 16))).data
        assert np.all(np.isfinite(out))
        # interior frames see only biases, so they agree
        np.testing.assert_allclose(out[0, :, 4:-4], np.repeat(out[0, :, 8:9], 8, axis=1), atol=1e-12)

    def test_decode_shape_check(self):
        with pytest.raises(ValueError):
            A.decode(small_model(), "h", np.zeros((1, 5, 16)))


# ---------------------------------------------------------------------------
# training


def _batches(seed, m):
    rng = np.random.default_rng(seed)
    W = m.config.window
    return rng.normal(size=(4, 23, W)), rng.normal(size=(4, 19, W))


def test_zero_lr_step_is_repeatable():
    m = small_model()
    bh, br = _batches(0, m)
    r1, _ = A.training_step(m, bh, br, lr=0.0, update_codebook=False)
    r2, _ = A.training_step(m, bh, br, lr=0.0, update_codebook=False)
    assert r1 == r2


def test_loss_report_adds_up():
    m = small_model()
    bh, br = _batches(1, m)
    rep, raw = A.training_step(m, bh, br)
    assert rep.total == pytest.approx(rep.recon_h + rep.recon_r + m.config.beta * rep.commit, rel=1e-12)
    assert raw.shape == (8, 2 * m.config.latent)


def test_empty_batch():
    m = small_model()
    with pytest.raises(ValueError):
        A.training_step(m, np.zeros((0, 23, 16)), np.zeros((0, 19, 16)))


def test_tiny_gradcheck():
    m = tiny_model()
    bh, br = _batches(2, m)
    _, _, _, states, _ = A.adapter_loss(m, bh, br)
    rep = nn.gradcheck(lambda p: A.adapter_loss(m, bh, br, frozen=states)[0], m.params)
    assert rep.max_error < 1e-4, rep.errors


def test_commitment_gradient_reaches_raw_amplitude():
    m = tiny_model()
    bh, br = _batches(3, m)
    raw = nn.Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    q, _ = A.quantize(raw, m.codebook)
    commit = nn.square(raw - nn.Tensor(q)).sum(axis=1).mean()
    commit.backward()
    np.testing.assert_allclose(raw.grad, 2 * (raw.data - q) / 3, atol=1e-14)


class TestReinit:
    def test_nothing_dead(self):
        m = small_model()
        before = m.codebook.entries.copy()
        pool = np.random.default_rng(0).normal(size=(20, 6))
        assert A.reinit_dead_codes(m, pool, np.random.default_rng(1)) == 0
        np.testing.assert_array_equal(m.codebook.entries, before)

    def test_single_dead_entry(self):
        m = small_model()
        m.codebook.usage[:] = 1.0 / 8
        m.codebook.usage[5] = 0.0
        before = m.codebook.entries.copy()
        pool = np.random.default_rng(0).normal(size=(20, 6))
        assert A.reinit_dead_codes(m, pool, np.random.default_rng(1)) == 1
        changed = np.flatnonzero(np.any(m.codebook.entries != before, axis=1))
        assert changed.tolist() == [5]
        assert m.codebook.usage[5] == pytest.approx(7 / 64)  # mean usage before the reset
        # the replacement sits close to some pool vector
        assert np.min(np.linalg.norm(pool - m.codebook.entries[5], axis=1)) < 0.1

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            A.reinit_dead_codes(small_model(), np.zeros((0, 6)), np.random.default_rng(0))


class TestCodebookMetrics:
    def test_single_entry(self):
        cm = A.usage_metrics(np.zeros(40, dtype=int), 32)
        assert cm.perplexity == 1.0 and cm.active_count == 1

    def test_uniform(self):
        cm = A.usage_metrics(np.tile(np.arange(32), 3), 32)
        assert cm.perplexity == pytest.approx(32.0, rel=1e-12)
        assert cm.active_count == 32

    def test_histogram_oracle(self):
        idx = np.random.default_rng(5).integers(0, 32, size=777) % 11
        cm = A.usage_metrics(idx, 32)
        counts = {}
        for i in idx:
            counts[int(i)] = counts.get(int(i), 0) + 1
        h = -math.fsum(c / 777 * math.log(c / 777) for c in counts.values())
        assert cm.perplexity == pytest.approx(math.exp(h), rel=1e-12)
        assert cm.active_count == sum(1 for c in counts.values() if c / 777 > 1 / 64)

    def test_empty(self):
        with pytest.raises(ValueError):
            A.usage_metrics(np.array([], dtype=int), 4)


def test_majority_codes_tie_breaks_low():
    idx = np.array([3, 1, 1, 3, 2])
    owner = np.array([0, 0, 1, 1, 2])
    assert A.majority_codes(idx, owner, ["a", "a", "b"]) == {"a": 1, "b": 2}


def test_window_starts_cover_tail():
    assert A.window_starts(100, 60, 15) == [0, 15, 30, 40]
    assert A.window_starts(30, 60, 15) == [0]


# ---------------------------------------------------------------------------
# adaptation and checkpoints


def _short_human(frames=40):
    g = GaitSpec("walk", 1.0, tuple([0.1] * 23), tuple([0.0] * 23))
    return generate_gait(HUMAN23, g, frames, 1 / 30, 0)


def test_adapt_refuses_untrained():
    with pytest.raises(RuntimeError):
        A.adapt(small_model(), _short_human())


def test_adapt_shape_label_and_determinism():
    m = small_model()
    m.trained = True
    seq = _short_human(37)
    out1, out2 = A.adapt(m, seq), A.adapt(m, seq)
    assert out1.skeleton == ROBOT19
    assert out1.frames.shape == (37, 19)
    assert out1.dt == seq.dt and out1.label == "walk"
    np.testing.assert_array_equal(out1.frames, out2.frames)


def test_adapt_short_sequence_is_padded():
    m = small_model()
    m.trained = True
    assert A.adapt(m, _short_human(5)).n_frames == 5


def test_adapt_skeleton_mismatch():
    m = small_model()
    m.trained = True
    robot_seq = MotionSequence(ROBOT19, 1 / 30, np.zeros((20, 19)))
    with pytest.raises(ValueError):
        A.adapt(m, robot_seq)


def test_blend_weights_positive():
    w = A._blend_weights(60)
    assert np.all(w > 0) and w.max() <= 1.0


def test_checkpoint_round_trip(tmp_path):
    m = small_model(seed=4)
    bh, br = _batches(4, m)
    A.training_step(m, bh, br)
    m.trained = True
    path = tmp_path / "adapter.model"
    A.save_model(m, path)
    text = path.read_text()
    assert text.startswith("#SMAP-PARAMS v1") and "#CODEBOOK n=8 dim=6" in text
    back = A.load_model(path)
    assert back.trained and back.step == m.step
    np.testing.assert_allclose(back.codebook.entries, m.codebook.entries, rtol=1e-8)
    seq = _short_human(30)
    np.testing.assert_allclose(A.adapt(back, seq).frames, A.adapt(m, seq).frames, rtol=1e-6, atol=1e-7)


def test_config_rejects_unknown_keys():
    with pytest.raises(KeyError):
        A.AdapterConfig.from_dict({"widnow": 3})


# ---------------------------------------------------------------------------
# properties of the trained default model (shared session fixture)


def _dominant_fft(frames, dt):
    x = frames - frames.mean(axis=0)
    n = 8 * len(x)
    power = (np.abs(np.fft.rfft(x, n=n, axis=0)) ** 2).sum(axis=1)
    power[0] = 0.0
    return np.fft.rfftfreq(n, dt)[np.argmax(power)]


@pytest.mark.slow
def test_trained_encoder_recovers_frequency(trained_adapter, heldout):
    model, _ = trained_adapter
    walk = [s for s in heldout[0] if s.label == "walk"]
    windows, _ = A.dataset_windows(walk, model.stats_h, model.config.window, model.config.stride)
    alpha, _, freq, _ = A.encode_windows(model, "h", windows)
    M = model.config.latent
    dominant = np.argmax(np.hypot(alpha[:, :M], alpha[:, M:]), axis=1)
    f = np.median(freq[np.arange(len(freq)), dominant])
    assert abs(f - 1.0) <= 0.1


@pytest.mark.slow
def test_adaptation_preserves_frequency(trained_adapter, heldout):
    model, _ = trained_adapter
    for seq in heldout[0][::8]:
        f_in = _dominant_fft(seq.frames, seq.dt)
        f_out = _dominant_fft(A.adapt(model, seq).frames, seq.dt)
        assert abs(f_out - f_in) <= 0.15 * f_in, seq.label


@pytest.mark.slow
def test_trained_model_checkpoint_is_stable(trained_adapter, tmp_path):
    model, _ = trained_adapter
    A.save_model(model, tmp_path / "a.model")
    A.save_model(A.load_model(tmp_path / "a.model"), tmp_path / "b.model")
    assert (tmp_path / "a.model").read_text() == (tmp_path / "b.model").read_text()
