"""Motion data types, the SMAP-MOTION text format, channel statistics and planar FK."""
from __future__ import annotations

import math
import re
from decimal import Decimal
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

STD_FLOOR = 1e-6
MOTION_MAGIC = "#SMAP-MOTION v1"
ROOTVEL_MARKER = "#ROOTVEL"


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Skeleton:
    """A planar kinematic tree with joint limits and reward-relevant masks.

    ``hip_mask``, ``ankle_mask`` and ``waist_mask`` may be ``None`` for skeletons
    that do not carry that annotation; the regularization reward refuses those.
    """

    name: str
    parent: np.ndarray
    link_length: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    upper_mask: np.ndarray
    hip_mask: Optional[np.ndarray] = None
    ankle_mask: Optional[np.ndarray] = None
    waist_mask: Optional[np.ndarray] = None
    order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "parent", _frozen(self.parent, int))
        n = len(self.parent)
        if n < 1:
            raise ValueError("skeleton needs at least one joint")
        for name in ("link_length", "q_min", "q_max"):
            arr = _frozen(getattr(self, name))
            if arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            set_(self, name, arr)
        if not np.all(self.q_min < self.q_max):
            raise ValueError("q_min must be < q_max elementwise")
        for name in ("upper_mask", "hip_mask", "ankle_mask", "waist_mask"):
            val = getattr(self, name)
            if val is None:
                continue
            arr = _frozen(val, bool)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            set_(self, name, arr)
        set_(self, "order", _frozen(_topological_order(self.parent), int))

    @property
    def n_dof(self) -> int:
        return len(self.parent)

    @property
    def lower_mask(self) -> np.ndarray:
        return ~self.upper_mask

    def __eq__(self, other):
        return isinstance(other, Skeleton) and self.name == other.name and self.n_dof == other.n_dof

    def __hash__(self):
        return hash((self.name, self.n_dof))


def _topological_order(parent: np.ndarray) -> list:
    n = len(parent)
    if np.any((parent < -1) | (parent >= n)):
        raise ValueError("parent index out of range")
    order, state = [], [0] * n  # 0 unvisited, 1 in progress, 2 done

    def visit(j):
        stack = []
        while j != -1 and state[j] != 2:
            if state[j] == 1:
                raise ValueError("parent indices contain a cycle")
            state[j] = 1
            stack.append(j)
            j = int(parent[j])
        for k in reversed(stack):
            state[k] = 2
            order.append(k)

    for j in range(n):
        visit(j)
    return order


@dataclass(frozen=True, eq=False)
class MotionSequence:
    skeleton: Skeleton
    dt: float
    frames: np.ndarray
    label: Optional[str] = None
    root_velocity: Optional[np.ndarray] = None

    def __post_init__(self):
        frames = _frozen(self.frames)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("frames must be an F x C matrix with F >= 1")
        if frames.shape[1] != self.skeleton.n_dof:
            raise ValueError(
                f"channel count {frames.shape[1]} does not match skeleton {self.skeleton.name} "
                f"({self.skeleton.n_dof} dof)"
            )
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite values")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "frames", frames)
        if self.root_velocity is not None:
            rv = _frozen(self.root_velocity)
            if rv.shape != (frames.shape[0], 3):
                raise ValueError("root_velocity must be F x 3")
            if not np.all(np.isfinite(rv)):
                raise ValueError("root_velocity contains non-finite values")
            object.__setattr__(self, "root_velocity", rv)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_channels(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.n_frames * self.dt

    def with_frames(self, frames) -> "MotionSequence":
        return replace(self, frames=frames)


@dataclass(frozen=True, eq=False)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean, std = _frozen(self.mean), _frozen(self.std)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be vectors of equal length")
        if not np.all(std > 0):
            raise ValueError("std must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


# --------------------------------------------------------------------------
# skeleton registry

def chain_skeleton(n: int, name: Optional[str] = None) -> Skeleton:
    """Unit-link serial chain; used for generic files and tests."""
    return Skeleton(
        name=name or f"chain{n}",
        parent=np.arange(n) - 1,
        link_length=np.ones(n),
        q_min=np.full(n, -math.pi),
        q_max=np.full(n, math.pi),
        upper_mask=np.zeros(n, bool),
        hip_mask=np.zeros(n, bool),
        ankle_mask=np.zeros(n, bool),
        waist_mask=np.zeros(n, bool),
    )


def _build(name, joints):
    """joints: list of (name, parent_name, length, q_min, q_max, tags)."""
    index = {j[0]: i for i, j in enumerate(joints)}
    parent = [index[j[1]] if j[1] else -1 for j in joints]

    def mask(tag):
        return [tag in j[5] for j in joints]

    return Skeleton(
        name=name,
        parent=parent,
        link_length=[j[2] for j in joints],
        q_min=[j[3] for j in joints],
        q_max=[j[4] for j in joints],
        upper_mask=mask("upper"),
        hip_mask=mask("hip"),
        ankle_mask=mask("ankle"),
        waist_mask=mask("waist"),
    )


def _robot19() -> Skeleton:
    j = []
    for side in ("l", "r"):
        j += [
            (f"{side}_hip_yaw", None, 0.05, -0.43, 0.43, {"hip"}),
            (f"{side}_hip_roll", f"{side}_hip_yaw", 0.05, -0.43, 0.43, {"hip"}),
            (f"{side}_hip_pitch", f"{side}_hip_roll", 0.40, -1.5, 1.5, {"hip"}),
            (f"{side}_knee", f"{side}_hip_pitch", 0.40, -0.26, 2.0, set()),
            (f"{side}_ankle", f"{side}_knee", 0.08, -0.87, 0.52, {"ankle"}),
        ]
    j.append(("torso", None, 0.50, -2.35, 2.35, {"upper", "waist"}))
    for side in ("l", "r"):
        j += [
            (f"{side}_shoulder_pitch", "torso", 0.05, -2.8, 2.8, {"upper"}),
            (f"{side}_shoulder_roll", f"{side}_shoulder_pitch", 0.05, -1.3, 1.3, {"upper"}),
            (f"{side}_shoulder_yaw", f"{side}_shoulder_roll", 0.30, -1.3, 1.3, {"upper"}),
            (f"{side}_elbow", f"{side}_shoulder_yaw", 0.30, -1.25, 2.6, {"upper"}),
        ]
    return _build("robot19", j)


def _human23() -> Skeleton:
    j = []
    for side in ("l", "r"):
        j += [
            (f"{side}_hip_yaw", None, 0.06, -1.0, 1.0, {"hip"}),
            (f"{side}_hip_roll", f"{side}_hip_yaw", 0.06, -1.0, 1.0, {"hip"}),
            (f"{side}_hip_pitch", f"{side}_hip_roll", 0.42, -2.2, 2.2, {"hip"}),
            (f"{side}_knee", f"{side}_hip_pitch", 0.42, -0.2, 2.6, set()),
            (f"{side}_ankle_pitch", f"{side}_knee", 0.06, -1.0, 1.0, {"ankle"}),
            (f"{side}_ankle_roll", f"{side}_ankle_pitch", 0.10, -0.8, 0.8, {"ankle"}),
        ]
    j += [
        ("spine_yaw", None, 0.15, -1.2, 1.2, {"upper", "waist"}),
        ("spine_roll", "spine_yaw", 0.15, -1.0, 1.0, {"upper", "waist"}),
        ("spine_pitch", "spine_roll", 0.25, -1.5, 1.5, {"upper", "waist"}),
    ]
    for side in ("l", "r"):
        j += [
            (f"{side}_shoulder_pitch", "spine_pitch", 0.05, -3.1, 3.1, {"upper"}),
            (f"{side}_shoulder_roll", f"{side}_shoulder_pitch", 0.05, -2.0, 2.0, {"upper"}),
            (f"{side}_shoulder_yaw", f"{side}_shoulder_roll", 0.28, -2.0, 2.0, {"upper"}),
            (f"{side}_elbow", f"{side}_shoulder_yaw", 0.26, -0.1, 2.6, {"upper"}),
        ]
    return _build("human23", j)


HUMAN23 = _human23()
ROBOT19 = _robot19()
_REGISTRY = {HUMAN23.name: HUMAN23, ROBOT19.name: ROBOT19}
_CHAIN_RE = re.compile(r"chain(\d+)$")


def register_skeleton(skeleton: Skeleton) -> None:
    _REGISTRY[skeleton.name] = skeleton


def get_skeleton(name: str) -> Skeleton:
    if name in _REGISTRY:
        return _REGISTRY[name]
    m = _CHAIN_RE.match(name)
    if m and int(m.group(1)) > 0:
        return chain_skeleton(int(m.group(1)))
    raise KeyError(f"unknown skeleton {name!r}")


# --------------------------------------------------------------------------
# SMAP-MOTION v1

class MotionParseError(ValueError):
    kind = "parse error"

    def __init__(self, message: str, line: int, column: int = 1):
        self.line, self.column = line, column
        super().__init__(f"{self.kind}: {message} (line {line}, column {column})")


class MalformedHeaderError(MotionParseError):
    kind = "malformed header"


class FrameCountMismatchError(MotionParseError):
    kind = "frame-count mismatch"


class NonFiniteValueError(MotionParseError):
    kind = "non-finite value"


class ChannelCountMismatchError(MotionParseError):
    kind = "channel-count mismatch"


def format_value(x: float) -> str:
    """Nine significant digits, positional notation."""
    if x == 0:
        return "0.000000000"
    # Decimal keeps the trailing zeros of the rounded mantissa, so the text is a
    # fixed point of parse -> format.
    return format(Decimal(f"{float(x):.8e}"), "f")


def _header_fields(line: str, lineno: int, magic: str, required: Sequence[str]) -> dict:
    parts = [p.strip() for p in line.split(";")]
    if parts[0] != magic:
        raise MalformedHeaderError(f"expected {magic!r}", lineno, 1)
    fields = {}
    col = len(parts[0]) + 2
    for p in parts[1:]:
        if "=" not in p:
            raise MalformedHeaderError(f"expected key=value, got {p!r}", lineno, col)
        k, v = p.split("=", 1)
        fields[k.strip()] = (v.strip(), col)
        col += len(p) + 2
    for k in required:
        if k not in fields:
            raise MalformedHeaderError(f"missing {k!r}", lineno, len(line) + 1)
    return fields


def _header_int(fields, key, lineno):
    v, col = fields[key]
    try:
        out = int(v)
    except ValueError:
        raise MalformedHeaderError(f"{key} is not an integer: {v!r}", lineno, col) from None
    if out < 1:
        raise MalformedHeaderError(f"{key} must be positive", lineno, col)
    return out


def _parse_rows(lines, start, count, width, what, stop_at=None):
    """Parse ``count`` rows of ``width`` floats starting at index ``start``."""
    rows = []
    i = start
    while len(rows) < count:
        if i >= len(lines) or (stop_at is not None and lines[i].startswith(stop_at)):
            raise FrameCountMismatchError(
                f"expected {count} {what} rows, found {len(rows)}", i + 1, 1
            )
        raw = lines[i]
        toks = raw.split()
        if len(toks) != width:
            raise ChannelCountMismatchError(
                f"expected {width} values, found {len(toks)}", i + 1, 1
            )
        row = []
        col = 1
        for tok in toks:
            col = raw.index(tok, col - 1) + 1
            try:
                val = float(tok)
            except ValueError:
                raise MalformedHeaderError(f"not a number: {tok!r}", i + 1, col) from None
            if not math.isfinite(val):
                raise NonFiniteValueError(f"value {tok!r}", i + 1, col)
            row.append(val)
            col += len(tok)
        rows.append(row)
        i += 1
    return np.array(rows, dtype=float).reshape(count, width), i


def parse_motion(text: str, skeleton: Optional[Skeleton] = None) -> MotionSequence:
    lines = text.split("\n")
    while lines and lines[-1].strip() == "":
        lines.pop()
    if not lines:
        raise MalformedHeaderError("empty document", 1, 1)
    header = lines[0].rstrip("\r")
    fields = _header_fields(header, 1, MOTION_MAGIC, ("skeleton", "dt", "channels", "frames"))
    dt_txt, dt_col = fields["dt"]
    try:
        dt = float(dt_txt)
    except ValueError:
        raise MalformedHeaderError(f"dt is not a number: {dt_txt!r}", 1, dt_col) from None
    if not (math.isfinite(dt) and dt > 0):
        raise MalformedHeaderError("dt must be positive and finite", 1, dt_col)
    channels = _header_int(fields, "channels", 1)
    n_frames = _header_int(fields, "frames", 1)
    name, name_col = fields["skeleton"]
    if skeleton is None:
        try:
            skeleton = get_skeleton(name)
        except KeyError:
            raise MalformedHeaderError(f"unknown skeleton {name!r}", 1, name_col) from None
    if skeleton.n_dof != channels:
        raise ChannelCountMismatchError(
            f"skeleton {name} has {skeleton.n_dof} dof but header declares {channels}", 1, fields["channels"][1]
        )
    label = fields["label"][0] if "label" in fields else None

    body = [ln.rstrip("\r") for ln in lines]
    frames, i = _parse_rows(body, 1, n_frames, channels, "frame", stop_at="#")
    root_velocity = None
    if i < len(body):
        if body[i].strip() == ROOTVEL_MARKER:
            root_velocity, i = _parse_rows(body, i + 1, n_frames, 3, "root-velocity", stop_at="#")
        elif body[i].startswith("#"):
            raise MalformedHeaderError(f"unexpected section {body[i]!r}", i + 1, 1)
        if i < len(body):
            if body[i].strip().startswith("#"):
                raise MalformedHeaderError(f"unexpected section {body[i]!r}", i + 1, 1)
            raise FrameCountMismatchError(f"more than {n_frames} rows", i + 1, 1)
    return MotionSequence(skeleton, dt, frames, label, root_velocity)


def serialize_motion(seq: MotionSequence) -> str:
    head = (
        f"{MOTION_MAGIC}; skeleton={seq.skeleton.name}; dt={float(seq.dt)!r}; "
        f"channels={seq.n_channels}; frames={seq.n_frames}"
    )
    if seq.label is not None:
        head += f"; label={seq.label}"
    out = [head]
    out += [" ".join(format_value(v) for v in row) for row in seq.frames]
    if seq.root_velocity is not None:
        out.append(ROOTVEL_MARKER)
        out += [" ".join(format_value(v) for v in row) for row in seq.root_velocity]
    return "\n".join(out) + "\n"


def load_motion(path) -> MotionSequence:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_motion(fh.read())


def save_motion(seq: MotionSequence, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_motion(seq))


# --------------------------------------------------------------------------
# statistics

def compute_stats(dataset: Sequence[MotionSequence]) -> ChannelStats:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    skel = dataset[0].skeleton
    if any(s.skeleton != skel for s in dataset):
        raise ValueError("all sequences must share one skeleton")
    stacked = np.concatenate([s.frames for s in dataset], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return ChannelStats(mean, std)


def _check_dims(seq, stats):
    if seq.n_channels != len(stats.mean):
        raise ValueError(f"sequence has {seq.n_channels} channels, stats have {len(stats.mean)}")


def normalize(seq: MotionSequence, stats: ChannelStats) -> MotionSequence:
    _check_dims(seq, stats)
    return seq.with_frames((seq.frames - stats.mean) / stats.std)


def denormalize(seq: MotionSequence, stats: ChannelStats) -> MotionSequence:
    _check_dims(seq, stats)
    return seq.with_frames(seq.frames * stats.std + stats.mean)


def resample(seq: MotionSequence, dt: float) -> MotionSequence:
    """Linear-interpolation resampling onto a new frame period, same duration."""
    if dt == seq.dt:
        return seq
    n = max(1, int(round(seq.duration / dt)))
    src_t = np.arange(seq.n_frames) * seq.dt
    dst_t = np.arange(n) * dt

    def interp(a):
        return np.stack([np.interp(dst_t, src_t, a[:, c]) for c in range(a.shape[1])], axis=1)

    rv = None if seq.root_velocity is None else interp(seq.root_velocity)
    return MotionSequence(seq.skeleton, dt, interp(seq.frames), seq.label, rv)


# --------------------------------------------------------------------------
# kinematics

def forward_kinematics(skeleton: Skeleton, q) -> np.ndarray:
    """Planar keypoints for joint angles ``q`` of shape (..., n_dof).

    Returns an array of shape (..., n_dof, 2).
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != skeleton.n_dof:
        raise ValueError(f"expected {skeleton.n_dof} joint angles, got {q.shape[-1]}")
    theta = np.zeros_like(q)
    pos = np.zeros(q.shape + (2,))
    for j in skeleton.order:
        p = skeleton.parent[j]
        base_theta = theta[..., p] if p >= 0 else 0.0
        base_pos = pos[..., p, :] if p >= 0 else 0.0
        theta[..., j] = base_theta + q[..., j]
        step = np.stack([np.cos(theta[..., j]), np.sin(theta[..., j])], axis=-1)
        pos[..., j, :] = base_pos + skeleton.link_length[j] * step
    return pos
