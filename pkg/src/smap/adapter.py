"""Dual vector-quantized periodic autoencoder with a shared amplitude codebook.

Each motion domain (human ``"h"``, robot ``"r"``) has its own encoder and
decoder. An encoder maps a normalized C x W window to a latent M x W signal,
reads a per-channel frequency and phase off a timing signal, and predicts an
amplitude vector of length 2M that is snapped to the nearest entry of a
codebook shared by both domains. The decoder reconstructs the window from the
phase-manifold embedding ``P = a0 sin(2 pi Phi) + a1 cos(2 pi Phi)``, with
``Phi = phi + f * T`` extrapolated over the window's relative times ``T``.

At inference, human motion is adapted to the robot by pairing the human
encoder with the robot decoder.
"""
from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .motion import ChannelStats, MotionSequence, Skeleton, compute_stats, get_skeleton
from .nn import Tensor

SIDES = ("h", "r")


@dataclass
class AdapterConfig:
    window: int = 60
    stride: int = 15
    latent: int = 8
    hidden: int = 32
    kernel: int = 5
    timing_kernel: int = 3
    amp_hidden: int = 32
    codebook_size: int = 32
    beta: float = 0.25
    ema_decay: float = 0.99
    dead_threshold: float = 0.1
    reinit: bool = True
    reinit_every: int = 100
    warmup: int = 500
    reinit_noise: float = 0.01
    pool_steps: int = 10
    lr: float = 1e-3
    steps: int = 3000
    batch: int = 16
    fft_pad: int = 4
    tie_amplitude: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown adapter config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhaseCoords:
    """Per-window phase coordinates; arrays carry a leading batch axis."""

    amplitude: np.ndarray  # (B, 2M)
    phase: np.ndarray  # (B, M) in [0, 1)
    frequency: np.ndarray  # (B, M) Hz, >= 0

    @property
    def a0(self):
        return self.amplitude[:, : self.phase.shape[1]]

    @property
    def a1(self):
        return self.amplitude[:, self.phase.shape[1]:]


@dataclass
class PhaseEmbedding:
    points: np.ndarray  # (B, M, W)
    times: np.ndarray  # (W,)


class Codebook:
    def __init__(self, entries: np.ndarray, usage: Optional[np.ndarray] = None,
                 last_refresh: Optional[np.ndarray] = None):
        entries = np.array(entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] < 1:
            raise ValueError("codebook entries must be an (n, dim) array with n >= 1")
        n = entries.shape[0]
        self.entries = entries
        self.usage = np.full(n, 1.0 / n) if usage is None else np.array(usage, dtype=float)
        self.last_refresh = np.zeros(n, dtype=int) if last_refresh is None else np.array(last_refresh, dtype=int)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.entries.copy(), self.usage.copy(), self.last_refresh.copy())

    def ema_update(self, alpha_raw: np.ndarray, index: np.ndarray, decay: float):
        """Pull each used entry toward the mean of its assigned inputs and decay usage."""
        counts = np.bincount(index, minlength=self.size).astype(float)
        for i in np.flatnonzero(counts):
            target = alpha_raw[index == i].mean(axis=0)
            self.entries[i] = decay * self.entries[i] + (1.0 - decay) * target
        self.usage = decay * self.usage + (1.0 - decay) * counts / counts.sum()


def quantize(alpha_raw, codebook: Codebook) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest codebook entry per row; ties go to the lowest index.

    Returns (alpha_q, index) for a (B, 2M) or (2M,) input.
    """
    a = np.asarray(alpha_raw.data if isinstance(alpha_raw, Tensor) else alpha_raw, dtype=float)
    if codebook.size == 0:
        raise ValueError("empty codebook")
    single = a.ndim == 1
    a2 = a[None] if single else a
    if a2.shape[1] != codebook.dim:
        raise ValueError(f"amplitude has length {a2.shape[1]}, codebook dim is {codebook.dim}")
    d = ((a2[:, None, :] - codebook.entries[None, :, :]) ** 2).sum(axis=-1)
    index = np.argmin(d, axis=1)
    q = codebook.entries[index]
    return (q[0], index[0]) if single else (q, index)


def straight_through(alpha_raw: Tensor, alpha_q: np.ndarray) -> Tensor:
    """Forward value alpha_q, gradient passed to alpha_raw unchanged."""
    return alpha_raw + Tensor(alpha_q - alpha_raw.data)


def relative_times(window: int, dt: float) -> np.ndarray:
    """Frame times in seconds relative to the window centre."""
    return (np.arange(window) - (window - 1) / 2.0) * dt


def extrapolate_and_embed(alpha, phase, freq, times) -> Tensor:
    """P[b, j, t] = a0 sin(2 pi (phi + f T_t)) + a1 cos(2 pi (phi + f T_t)).

    Accepts Tensors or arrays of shapes (B, 2M), (B, M), (B, M), (W,).
    """
    alpha, phase, freq = nn.as_tensor(alpha), nn.as_tensor(phase), nn.as_tensor(freq)
    M = phase.shape[-1]
    a0 = alpha[:, :M].reshape(alpha.shape[0], M, 1)
    a1 = alpha[:, M:].reshape(alpha.shape[0], M, 1)
    big_phi = phase.reshape(phase.shape[0], M, 1) + freq.reshape(freq.shape[0], M, 1) * np.asarray(times)[None, None, :]
    ang = big_phi * (2.0 * math.pi)
    return a0 * nn.sine(ang) + a1 * nn.cosine(ang)


@dataclass
class EncodeOutput:
    alpha_raw: Tensor
    phase: Tensor
    freq: Tensor
    latent: Tensor
    signal: Tensor
    peak_bin: np.ndarray


@dataclass
class LossReport:
    recon_h: float
    recon_r: float
    commit: float
    total: float


@dataclass
class AdapterModel:
    config: AdapterConfig
    skeleton_h: Skeleton
    skeleton_r: Skeleton
    dt: float
    params: nn.ParamSet
    codebook: Codebook
    stats_h: ChannelStats
    stats_r: ChannelStats
    trained: bool = False
    step: int = 0

    def skeleton(self, side: str) -> Skeleton:
        return self.skeleton_h if side == "h" else self.skeleton_r

    def stats(self, side: str) -> ChannelStats:
        return self.stats_h if side == "h" else self.stats_r

    def side_params(self, prefix: str) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items() if k.startswith(prefix + ".")}


def init_model(config: AdapterConfig, skeleton_h: Skeleton, skeleton_r: Skeleton, dt: float,
               stats_h: Optional[ChannelStats] = None, stats_r: Optional[ChannelStats] = None) -> AdapterModel:
    rng = np.random.default_rng(config.seed)
    M, H, K = config.latent, config.hidden, config.kernel
    p = nn.ParamSet()
    for side, skel in (("h", skeleton_h), ("r", skeleton_r)):
        C = skel.n_dof
        nn.init_conv(p, f"enc_{side}.conv1", C, H, K, rng)
        nn.init_conv(p, f"enc_{side}.conv2", H, M, K, rng)
        nn.init_conv(p, f"enc_{side}.timing", M, M, config.timing_kernel, rng)
        if not config.tie_amplitude or side == "h":
            head = _amp_prefix(config, side)
            nn.init_dense(p, f"{head}.amp1", 1 if config.tie_amplitude else M, config.amp_hidden, rng)
            nn.init_dense(p, f"{head}.amp2", config.amp_hidden, 2 * M, rng)
        nn.init_conv(p, f"dec_{side}.conv1", M, H, K, rng)
        nn.init_conv(p, f"dec_{side}.conv2", H, C, K, rng)
    codebook = Codebook(rng.normal(0.0, 0.1, size=(config.codebook_size, 2 * M)))
    if stats_h is None:
        stats_h = ChannelStats(np.zeros(skeleton_h.n_dof), np.ones(skeleton_h.n_dof))
    if stats_r is None:
        stats_r = ChannelStats(np.zeros(skeleton_r.n_dof), np.ones(skeleton_r.n_dof))
    return AdapterModel(config, skeleton_h, skeleton_r, float(dt), p, codebook, stats_h, stats_r)


# ---------------------------------------------------------------------------
# encoder / decoder


def _spectral_bases(window: int, pad: int, dt: float):
    n = window * pad
    t = np.arange(window)[:, None]
    k = np.arange(n // 2 + 1)[None, :]
    ang = 2.0 * math.pi * t * k / n
    return np.cos(ang), np.sin(ang), 1.0 / (n * dt)


def estimate_timing(signal: Tensor, dt: float, pad: int = 4, frozen_bins: Optional[np.ndarray] = None):
    """Dominant frequency (Hz) and phase (cycles, [0, 1)) of each row of a (B, M, W) signal.

    Frequency: argmax of the zero-padded power spectrum (DC excluded) refined by
    a parabola through the peak bin and its neighbours. Phase: angle of the
    signal's Fourier projection at that frequency, measured at the window centre.
    """
    B, M, W = signal.shape
    centred = signal - signal.mean(axis=2, keepdims=True)
    cos_b, sin_b, bin_hz = _spectral_bases(W, pad, dt)
    re = nn.matmul(centred, cos_b)
    im = nn.matmul(centred, sin_b)
    power = nn.square(re) + nn.square(im)
    n_bins = power.shape[-1]
    if frozen_bins is None:
        k = 1 + np.argmax(power.data[..., 1:n_bins - 1], axis=-1)
    else:
        k = frozen_bins
    pa = nn.take_last(power, k - 1)
    pb = nn.take_last(power, k)
    pc = nn.take_last(power, k + 1)
    denom = pa - pb * 2.0 + pc
    ok = (np.abs(denom.data) > 1e-300) & (pb.data > 1e-20)
    safe_denom = denom + Tensor(np.where(ok, 0.0, 1.0))
    delta = (pa - pc) * 0.5 / safe_denom * Tensor(ok.astype(float))
    freq = (delta + Tensor(k.astype(float))) * bin_hz
    live = (pb.data > 1e-20).astype(float)
    freq = nn.relu(freq) * Tensor(live)

    times = relative_times(W, dt)
    ang = freq.reshape(B, M, 1) * (2.0 * math.pi * times)[None, None, :]
    a = (centred * nn.cosine(ang)).sum(axis=2)
    b = -(centred * nn.sine(ang)).sum(axis=2)
    raw = nn.atan2(b, a) * (1.0 / (2.0 * math.pi))
    phase = raw + Tensor(np.mod(raw.data, 1.0) - raw.data)
    # guard the mod against landing exactly on 1.0 through rounding
    phase.data = np.where(phase.data >= 1.0, 0.0, phase.data)
    return freq, phase, k


def _as_batch(x, channels: int) -> Tensor:
    x = nn.as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3 or x.shape[1] != channels:
        raise ValueError(f"expected windows with {channels} channels, got shape {x.shape}")
    return x


def _amp_prefix(config: AdapterConfig, side: str) -> str:
    return "enc_amp" if config.tie_amplitude else f"enc_{side}"


def _amp_input(z: Tensor, freq: Tensor, model: AdapterModel) -> Tensor:
    """Amplitude-branch features.

    With ``tie_amplitude`` (the default) the branch reads the timing branch's
    per-channel frequencies in cycles per window. Those mean the same thing on
    both skeletons, so one head serving both encoders places matching tempos at
    matching codebook coordinates. Otherwise each side pools its own latent.
    """
    if model.config.tie_amplitude:
        return freq.mean(axis=1, keepdims=True) * (z.shape[-1] * model.dt)
    return nn.avg_pool_time(z)


def encode(model: AdapterModel, side: str, window, frozen_bins=None) -> EncodeOutput:
    p = model.params
    e = f"enc_{side}"
    x = _as_batch(window, model.skeleton(side).n_dof)
    h = nn.elu(nn.conv1d(x, p[f"{e}.conv1.w"], p[f"{e}.conv1.b"]))
    z = nn.conv1d(h, p[f"{e}.conv2.w"], p[f"{e}.conv2.b"])
    s = nn.conv1d(z, p[f"{e}.timing.w"], p[f"{e}.timing.b"])
    freq, phase, k = estimate_timing(s, model.dt, model.config.fft_pad, frozen_bins)
    head = _amp_prefix(model.config, side)
    a = nn.elu(nn.dense(_amp_input(z, freq, model), p[f"{head}.amp1.w"], p[f"{head}.amp1.b"]))
    alpha = nn.dense(a, p[f"{head}.amp2.w"], p[f"{head}.amp2.b"])
    return EncodeOutput(alpha, phase, freq, z, s, k)


def decode(model: AdapterModel, side: str, points) -> Tensor:
    p = model.params
    d = f"dec_{side}"
    P = nn.as_tensor(points)
    if P.ndim == 2:
        P = P.reshape(1, *P.shape)
    if P.shape[1] != model.config.latent:
        raise ValueError(f"embedding has {P.shape[1]} channels, model expects {model.config.latent}")
    h = nn.elu(nn.conv1d(P, p[f"{d}.conv1.w"], p[f"{d}.conv1.b"]))
    return nn.conv1d(h, p[f"{d}.conv2.w"], p[f"{d}.conv2.b"])


def forward_side(model: AdapterModel, side_in: str, side_out: str, x, frozen=None):
    """encode(side_in) -> quantize -> embed -> decode(side_out)."""
    enc = encode(model, side_in, x, None if frozen is None else frozen["bins"])
    if frozen is None:
        alpha_q, index = quantize(enc.alpha_raw, model.codebook)
        offset = alpha_q - enc.alpha_raw.data
    else:
        alpha_q, index, offset = frozen["alpha_q"], frozen["index"], frozen["offset"]
    alpha_st = enc.alpha_raw + Tensor(offset)
    times = relative_times(nn.as_tensor(x).shape[-1], model.dt)
    P = extrapolate_and_embed(alpha_st, enc.phase, enc.freq, times)
    recon = decode(model, side_out, P)
    state = {"bins": enc.peak_bin, "alpha_q": alpha_q, "index": index, "offset": offset}
    return recon, enc, state


def adapter_loss(model: AdapterModel, batch_h, batch_r, frozen=None):
    """Total loss = recon_h + recon_r + beta * commit, with a straight-through quantizer.

    ``frozen`` pins the quantizer choice and spectral peak bins from an earlier
    call, which makes the loss a smooth function of the parameters for
    finite-difference checks.
    """
    parts = {}
    states = {}
    raws, qs = [], []
    for side, batch in (("h", batch_h), ("r", batch_r)):
        x = nn.as_tensor(batch)
        recon, enc, st = forward_side(model, side, side, x, None if frozen is None else frozen[side])
        parts[side] = nn.mse(recon, x)
        states[side] = st
        raws.append(enc.alpha_raw)
        qs.append(st["alpha_q"])
    raw = nn.concat(raws, axis=0)
    commit = nn.square(raw - Tensor(np.concatenate(qs, axis=0))).sum(axis=1).mean()
    total = parts["h"] + parts["r"] + commit * model.config.beta
    return total, parts, commit, states, raw.data


# ---------------------------------------------------------------------------
# training


def window_starts(n_frames: int, window: int, stride: int) -> List[int]:
    if n_frames <= window:
        return [0]
    starts = list(range(0, n_frames - window + 1, stride))
    if starts[-1] != n_frames - window:
        starts.append(n_frames - window)
    return starts


def _pad_frames(frames: np.ndarray, window: int) -> np.ndarray:
    if frames.shape[0] >= window:
        return frames
    return np.pad(frames, ((0, window - frames.shape[0]), (0, 0)), mode="edge")


def dataset_windows(dataset: Sequence[MotionSequence], stats: ChannelStats, window: int, stride: int):
    """All sliding windows, normalized, as a (N, C, W) array plus the owning sequence index."""
    out, owner = [], []
    for i, seq in enumerate(dataset):
        z = _pad_frames((seq.frames - stats.mean) / stats.std, window)
        for s in window_starts(z.shape[0], window, stride):
            out.append(z[s:s + window].T)
            owner.append(i)
    return np.stack(out), np.array(owner)


def sample_batch(normed: Sequence[np.ndarray], window: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((batch, normed[0].shape[1], window))
    for b in range(batch):
        z = normed[rng.integers(len(normed))]
        start = rng.integers(z.shape[0] - window + 1)
        out[b] = z[start:start + window].T
    return out


def training_step(model: AdapterModel, batch_h, batch_r, lr: Optional[float] = None,
                  update_codebook: bool = True) -> Tuple[LossReport, np.ndarray]:
    """One optimisation step; returns the loss report and the pre-quantization amplitudes."""
    if len(batch_h) == 0 or len(batch_r) == 0:
        raise ValueError("empty batch")
    cfg = model.config
    model.params.zero_grad()
    total, parts, commit, states, raw = adapter_loss(model, batch_h, batch_r)
    if not np.isfinite(total.data):
        raise FloatingPointError("adapter loss is not finite")
    total.backward()
    model.step += 1
    nn.adam_step(model.params, lr=cfg.lr if lr is None else lr, t=model.step)
    if update_codebook:
        index = np.concatenate([states["h"]["index"], states["r"]["index"]])
        model.codebook.ema_update(raw, index, cfg.ema_decay)
    report = LossReport(float(parts["h"].data), float(parts["r"].data), float(commit.data), float(total.data))
    return report, raw


def reinit_dead_codes(model: AdapterModel, recent_alpha_pool: np.ndarray, rng: np.random.Generator) -> int:
    """Replace entries whose EMA usage is below the dead threshold with noisy pool draws."""
    pool = np.asarray(recent_alpha_pool, dtype=float)
    if pool.ndim != 2 or pool.shape[0] == 0:
        raise ValueError("empty amplitude pool")
    cb = model.codebook
    threshold = model.config.dead_threshold / cb.size
    dead = np.flatnonzero(cb.usage < threshold)
    if dead.size == 0:
        return 0
    scale = model.config.reinit_noise * (pool.std(axis=0) + 1e-8)
    picks = rng.integers(pool.shape[0], size=dead.size)
    cb.entries[dead] = pool[picks] + rng.normal(size=(dead.size, cb.dim)) * scale
    cb.usage[dead] = cb.usage.mean()
    cb.last_refresh[dead] = model.step
    return int(dead.size)


@dataclass
class TrainHistory:
    steps: List[int] = field(default_factory=list)
    total: List[float] = field(default_factory=list)
    recon_h: List[float] = field(default_factory=list)
    recon_r: List[float] = field(default_factory=list)
    commit: List[float] = field(default_factory=list)
    reinit_events: List[Tuple[int, int]] = field(default_factory=list)

    def append(self, step: int, rep: LossReport):
        self.steps.append(step)
        self.total.append(rep.total)
        self.recon_h.append(rep.recon_h)
        self.recon_r.append(rep.recon_r)
        self.commit.append(rep.commit)

    def to_csv(self) -> str:
        lines = ["step,total,recon_h,recon_r,commit"]
        for row in zip(self.steps, self.total, self.recon_h, self.recon_r, self.commit):
            lines.append(f"{row[0]}," + ",".join(nn._fmt(v) for v in row[1:]))
        return "\n".join(lines) + "\n"


def train_adapter(dataset_h: Sequence[MotionSequence], dataset_r: Sequence[MotionSequence],
                  config: Optional[AdapterConfig] = None, log_every: int = 1, progress=None):
    """Train both autoencoders on unpaired corpora. Returns (model, history)."""
    config = config or AdapterConfig()
    if not dataset_h or not dataset_r:
        raise ValueError("empty dataset")
    dt = dataset_h[0].dt
    if any(abs(s.dt - dt) > 1e-12 for s in list(dataset_h) + list(dataset_r)):
        raise ValueError("all sequences must share one frame period")
    stats_h, stats_r = compute_stats(dataset_h), compute_stats(dataset_r)
    model = init_model(config, dataset_h[0].skeleton, dataset_r[0].skeleton, dt, stats_h, stats_r)
    rng = np.random.default_rng(config.seed + 1)
    normed_h = [_pad_frames((s.frames - stats_h.mean) / stats_h.std, config.window) for s in dataset_h]
    normed_r = [_pad_frames((s.frames - stats_r.mean) / stats_r.std, config.window) for s in dataset_r]
    pool: deque = deque(maxlen=config.pool_steps)
    history = TrainHistory()
    for step in range(1, config.steps + 1):
        bh = sample_batch(normed_h, config.window, config.batch, rng)
        br = sample_batch(normed_r, config.window, config.batch, rng)
        rep, raw = training_step(model, bh, br)
        pool.append(raw)
        if step % log_every == 0 or step == 1:
            history.append(step, rep)
        if config.reinit and step > config.warmup and step % config.reinit_every == 0:
            n = reinit_dead_codes(model, np.concatenate(pool, axis=0), rng)
            history.reinit_events.append((step, n))
        if progress is not None:
            progress(step, rep)
    model.trained = True
    return model, history


# ---------------------------------------------------------------------------
# inference


def encode_windows(model: AdapterModel, side: str, windows: np.ndarray, chunk: int = 256):
    """Batched inference encode; returns (alpha_raw, phase, freq, index) arrays."""
    outs = []
    for i in range(0, len(windows), chunk):
        enc = encode(model, side, windows[i:i + chunk])
        _, idx = quantize(enc.alpha_raw, model.codebook)
        outs.append((enc.alpha_raw.data, enc.phase.data, enc.freq.data, idx))
    return tuple(np.concatenate(parts, axis=0) for parts in zip(*outs))


def reconstruct_windows(model: AdapterModel, side_in: str, side_out: str, windows: np.ndarray) -> np.ndarray:
    recon, _, _ = forward_side(model, side_in, side_out, windows)
    return recon.data


def _blend_weights(window: int) -> np.ndarray:
    # Hann shape shifted half a sample so no frame gets zero weight.
    return np.sin(math.pi * (np.arange(window) + 0.5) / window) ** 2


def adapt(model: AdapterModel, human_seq: MotionSequence, source: str = "h", target: str = "r") -> MotionSequence:
    """Map a human-skeleton sequence onto the robot skeleton (encoder h -> decoder r)."""
    if not model.trained:
        raise RuntimeError("adapter model is untrained")
    if human_seq.skeleton != model.skeleton(source):
        raise ValueError(
            f"sequence skeleton {human_seq.skeleton.name} does not match {model.skeleton(source).name}"
        )
    cfg = model.config
    W = cfg.window
    F = human_seq.n_frames
    z = _pad_frames((human_seq.frames - model.stats(source).mean) / model.stats(source).std, W)
    starts = window_starts(z.shape[0], W, cfg.stride)
    windows = np.stack([z[s:s + W].T for s in starts])
    recon = reconstruct_windows(model, source, target, windows)  # (N, C_out, W)
    C_out = model.skeleton(target).n_dof
    acc = np.zeros((z.shape[0], C_out))
    wsum = np.zeros(z.shape[0])
    w = _blend_weights(W)
    for s, r in zip(starts, recon):
        acc[s:s + W] += (r * w).T
        wsum[s:s + W] += w
    out = acc[:F] / wsum[:F, None]
    st = model.stats(target)
    frames = out * st.std + st.mean
    return MotionSequence(model.skeleton(target), human_seq.dt, frames, human_seq.label, human_seq.root_velocity)


@dataclass
class CodebookMetrics:
    histogram: np.ndarray
    perplexity: float
    active_count: int


def usage_metrics(indices: np.ndarray, n: int) -> CodebookMetrics:
    if len(indices) == 0:
        raise ValueError("no assignments")
    hist = np.bincount(np.asarray(indices), minlength=n)
    p = hist / hist.sum()
    nz = p[p > 0]
    perplexity = float(np.exp(-(nz * np.log(nz)).sum()))
    active = int(np.sum(p > 1.0 / (2 * n)))
    return CodebookMetrics(hist, perplexity, active)


def dataset_indices(model: AdapterModel, side: str, dataset: Sequence[MotionSequence]):
    windows, owner = dataset_windows(dataset, model.stats(side), model.config.window, model.config.stride)
    *_, idx = encode_windows(model, side, windows)
    return idx, owner


def codebook_metrics(model: AdapterModel, dataset_h: Sequence[MotionSequence],
                     dataset_r: Sequence[MotionSequence] = ()) -> CodebookMetrics:
    """Usage histogram, perplexity and active count over all windows of the given data."""
    parts = []
    if dataset_h:
        parts.append(dataset_indices(model, "h", dataset_h)[0])
    if dataset_r:
        parts.append(dataset_indices(model, "r", dataset_r)[0])
    if not parts:
        raise ValueError("empty dataset")
    return usage_metrics(np.concatenate(parts), model.codebook.size)


def majority_codes(indices: np.ndarray, owner: np.ndarray, labels: Sequence[str]) -> Dict[str, int]:
    """Most frequent code per label (ties to the lowest index)."""
    per_label: Dict[str, Counter] = {}
    for idx, o in zip(indices, owner):
        per_label.setdefault(labels[o], Counter())[int(idx)] += 1
    out = {}
    for lab, cnt in per_label.items():
        top = max(cnt.values())
        out[lab] = min(k for k, v in cnt.items() if v == top)
    return out


def reconstruction_mse(model: AdapterModel, side: str, dataset: Sequence[MotionSequence]) -> float:
    windows, _ = dataset_windows(dataset, model.stats(side), model.config.window, model.config.stride)
    recon = reconstruct_windows(model, side, side, windows)
    return float(np.mean((recon - windows) ** 2))


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: AdapterModel, path) -> None:
    import json

    lines = [nn.dump_params(model.params.values()).rstrip("\n")]
    cfg = asdict(model.config)
    meta = {"skeleton_h": model.skeleton_h.name, "skeleton_r": model.skeleton_r.name, "dt": model.dt,
            "trained": model.trained, "step": model.step, "config": cfg}
    lines.append("#META " + json.dumps(meta, sort_keys=True))
    cb = model.codebook
    lines.append(f"#CODEBOOK n={cb.size} dim={cb.dim}")
    for row in cb.entries:
        lines.append(" ".join(nn._fmt(v) for v in row))
    lines.append("#USAGE")
    lines.append(" ".join(nn._fmt(v) for v in cb.usage))
    for side in SIDES:
        st = model.stats(side)
        lines.append(f"#STATS side={side} channels={len(st.mean)}")
        lines.append(" ".join(nn._fmt(v) for v in st.mean))
        lines.append(" ".join(nn._fmt(v) for v in st.std))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> AdapterModel:
    import json

    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    values = nn.parse_params(text)
    lines = text.split("\n")
    meta = None
    entries, usage, stats = None, None, {}
    i = 0
    while i < len(lines):
        ln = lines[i]
        if ln.startswith("#META "):
            meta = json.loads(ln[len("#META "):])
        elif ln.startswith("#CODEBOOK"):
            kv = dict(p.split("=") for p in ln.split()[1:])
            n = int(kv["n"])
            entries = np.array([[float(t) for t in lines[i + 1 + r].split()] for r in range(n)])
            i += n
        elif ln.startswith("#USAGE"):
            usage = np.array([float(t) for t in lines[i + 1].split()])
            i += 1
        elif ln.startswith("#STATS"):
            kv = dict(p.split("=") for p in ln.split()[1:])
            mean = np.array([float(t) for t in lines[i + 1].split()])
            std = np.array([float(t) for t in lines[i + 2].split()])
            stats[kv["side"]] = ChannelStats(mean, std)
            i += 2
        i += 1
    if meta is None or entries is None or set(stats) != set(SIDES):
        raise ValueError("incomplete adapter checkpoint")
    config = AdapterConfig.from_dict(meta["config"])
    model = init_model(config, get_skeleton(meta["skeleton_h"]), get_skeleton(meta["skeleton_r"]), meta["dt"],
                       stats["h"], stats["r"])
    model.params.load_values(values)
    model.codebook = Codebook(entries, usage)
    model.trained = bool(meta["trained"])
    model.step = int(meta["step"])
    return model
