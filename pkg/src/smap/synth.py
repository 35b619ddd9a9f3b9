"""Seeded periodic gait corpora for a human-like and a robot-like skeleton."""
from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .motion import HUMAN23, ROBOT19, MotionSequence, Skeleton, save_motion

MASK64 = (1 << 64) - 1
ROBOT_DOMAIN_SALT = 1 << 60


@dataclass(frozen=True)
class GaitSpec:
    label: str
    base_frequency: float
    amplitude: Tuple[float, ...]
    phase_offset: Tuple[float, ...]
    noise_std: float = 0.0
    root_speed: float = 0.0

    def __post_init__(self):
        if not self.base_frequency > 0:
            raise ValueError("base_frequency must be positive")
        if len(self.amplitude) != len(self.phase_offset):
            raise ValueError("amplitude and phase_offset lengths differ")
        if any(not 0.0 <= p < 1.0 for p in self.phase_offset):
            raise ValueError("phase offsets must lie in [0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class CorpusSpec:
    skeleton_h: Skeleton
    skeleton_r: Skeleton
    gait_classes: Tuple[Tuple[GaitSpec, GaitSpec], ...]
    sequences_per_class: int = 8
    frames: int = 240
    dt: float = 1.0 / 30.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "skeleton_h": self.skeleton_h.name,
            "skeleton_r": self.skeleton_r.name,
            "sequences_per_class": self.sequences_per_class,
            "frames": self.frames,
            "dt": self.dt,
            "seed": self.seed,
            "gait_classes": [
                {"human": _gait_dict(h), "robot": _gait_dict(r)} for h, r in self.gait_classes
            ],
        }


def _gait_dict(g: GaitSpec) -> dict:
    return {
        "label": g.label,
        "base_frequency": g.base_frequency,
        "amplitude": list(g.amplitude),
        "phase_offset": list(g.phase_offset),
        "noise_std": g.noise_std,
        "root_speed": g.root_speed,
    }


def sequence_seed(corpus_seed: int, class_index: int, sequence_index: int) -> int:
    """Counter-based per-sequence seed: seed ^ class<<40 ^ index<<20 (64-bit)."""
    return (corpus_seed ^ (class_index << 40) ^ (sequence_index << 20)) & MASK64


def generate_gait(skeleton: Skeleton, spec: GaitSpec, frames: int, dt: float, seed: int) -> MotionSequence:
    if frames < 1:
        raise ValueError("frames must be >= 1")
    amp = np.asarray(spec.amplitude, dtype=float)
    off = np.asarray(spec.phase_offset, dtype=float)
    if amp.shape != (skeleton.n_dof,):
        raise ValueError(f"gait {spec.label!r} has {amp.size} amplitudes, skeleton has {skeleton.n_dof} dof")
    reach = np.minimum(-skeleton.q_min, skeleton.q_max)
    if np.any(np.abs(amp) > reach):
        raise ValueError(f"gait {spec.label!r} amplitude exceeds joint limits")
    t = np.arange(frames)[:, None] * dt
    q = amp * np.sin(2 * np.pi * (spec.base_frequency * t + off))
    if spec.noise_std > 0:
        rng = np.random.default_rng(seed & MASK64)
        q = q + rng.normal(0.0, spec.noise_std, size=q.shape)
    q = np.clip(q, skeleton.q_min, skeleton.q_max)
    root = np.zeros((frames, 3))
    root[:, 0] = spec.root_speed
    return MotionSequence(skeleton, dt, q, spec.label, root)


def generate_corpus(spec: CorpusSpec) -> Tuple[List[MotionSequence], List[MotionSequence]]:
    if len(spec.gait_classes) < 2:
        raise ValueError("need at least two gait classes")
    labels = []
    for pair in spec.gait_classes:
        if len(pair) != 2:
            raise ValueError("each gait class must be a (human, robot) pair")
        h, r = pair
        if h.label != r.label:
            raise ValueError(f"mismatched pair labels {h.label!r} / {r.label!r}")
        labels.append(h.label)
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate gait labels")
    data_h, data_r = [], []
    for ci, (gh, gr) in enumerate(spec.gait_classes):
        for si in range(spec.sequences_per_class):
            s = sequence_seed(spec.seed, ci, si)
            data_h.append(generate_gait(spec.skeleton_h, gh, spec.frames, spec.dt, s))
            data_r.append(generate_gait(spec.skeleton_r, gr, spec.frames, spec.dt, s ^ ROBOT_DOMAIN_SALT))
    return data_h, data_r


def label_histogram(dataset: Sequence[MotionSequence]) -> Dict[str, int]:
    return dict(Counter(s.label for s in dataset))


# --------------------------------------------------------------------------
# default desk-scale corpus

def _pattern(skeleton: Skeleton, joint_amps: Dict[str, Tuple[float, float]]):
    """Expand {joint-name-prefix: (amplitude, offset)} onto a skeleton.

    Prefixes of the form ``l_*``/``r_*`` get opposite-phase partners when the
    offset is given for the left side only.
    """
    names = _JOINT_NAMES[skeleton.name]
    amp = np.zeros(skeleton.n_dof)
    off = np.zeros(skeleton.n_dof)
    for i, n in enumerate(names):
        if n in joint_amps:
            amp[i], off[i] = joint_amps[n]
        elif n.startswith("r_") and "l_" + n[2:] in joint_amps:
            a, o = joint_amps["l_" + n[2:]]
            amp[i], off[i] = a, (o + 0.5) % 1.0
    return tuple(float(a) for a in amp), tuple(float(o) for o in off)


_JOINT_NAMES = {
    "robot19": [
        f"{s}_{j}" for s in "lr" for j in ("hip_yaw", "hip_roll", "hip_pitch", "knee", "ankle")
    ] + ["torso"] + [
        f"{s}_{j}" for s in "lr" for j in ("shoulder_pitch", "shoulder_roll", "shoulder_yaw", "elbow")
    ],
    "human23": [
        f"{s}_{j}" for s in "lr"
        for j in ("hip_yaw", "hip_roll", "hip_pitch", "knee", "ankle_pitch", "ankle_roll")
    ] + ["spine_yaw", "spine_roll", "spine_pitch"] + [
        f"{s}_{j}" for s in "lr" for j in ("shoulder_pitch", "shoulder_roll", "shoulder_yaw", "elbow")
    ],
}


def joint_names(skeleton: Skeleton) -> List[str]:
    return list(_JOINT_NAMES.get(skeleton.name, [f"j{i}" for i in range(skeleton.n_dof)]))


# Per-class joint patterns (amplitude rad, phase offset cycles). Robot amplitudes
# respect A * (2 pi f)^2 <= ~25 rad/s^2 so the toy actuators can track them; the
# human patterns are larger, which is what makes raw retargeting awkward.
_HUMAN_CLASSES = {
    "walk": (1.0, 1.0, {
        "l_hip_pitch": (0.55, 0.0), "l_knee": (0.2, 0.2), "l_ankle_pitch": (0.3, 0.1),
        "l_ankle_roll": (0.1, 0.3), "l_hip_roll": (0.08, 0.25), "spine_yaw": (0.12, 0.0),
        "l_shoulder_pitch": (0.5, 0.5), "l_elbow": (0.1, 0.6),
    }),
    "fast_walk": (1.6, 1.8, {
        "l_hip_pitch": (0.9, 0.0), "l_knee": (0.2, 0.25), "l_ankle_pitch": (0.45, 0.15),
        "l_ankle_roll": (0.15, 0.3), "l_hip_roll": (0.12, 0.25), "spine_yaw": (0.2, 0.0),
        "spine_pitch": (0.15, 0.25), "l_shoulder_pitch": (0.9, 0.5), "l_elbow": (0.1, 0.6),
    }),
    "wave": (1.3, 0.0, {
        "l_shoulder_roll": (1.1, 0.0), "l_shoulder_yaw": (0.8, 0.25), "l_elbow": (0.1, 0.1),
        "spine_roll": (0.25, 0.5), "spine_yaw": (0.15, 0.25),
    }),
    "squat": (0.8, 0.0, {
        "l_hip_pitch": (1.3, 0.0), "r_hip_pitch": (1.3, 0.0), "l_knee": (0.2, 0.0),
        "r_knee": (0.2, 0.0), "l_ankle_pitch": (0.6, 0.5), "r_ankle_pitch": (0.6, 0.5),
        "spine_pitch": (0.9, 0.0), "l_shoulder_pitch": (1.2, 0.0), "r_shoulder_pitch": (1.2, 0.0),
    }),
}

_ROBOT_CLASSES = {
    "walk": (1.0, 1.0, {
        "l_hip_pitch": (0.4, 0.0), "l_knee": (0.25, 0.2), "l_ankle": (0.2, 0.1),
        "torso": (0.08, 0.0), "l_shoulder_pitch": (0.3, 0.5), "l_elbow": (0.15, 0.6),
    }),
    "fast_walk": (1.6, 1.8, {
        "l_hip_pitch": (0.25, 0.0), "l_knee": (0.15, 0.25), "l_ankle": (0.15, 0.15),
        "l_hip_roll": (0.05, 0.25), "torso": (0.06, 0.0), "l_shoulder_pitch": (0.25, 0.5),
        "l_elbow": (0.1, 0.6),
    }),
    "wave": (1.3, 0.0, {
        "l_shoulder_roll": (0.35, 0.0), "l_shoulder_yaw": (0.25, 0.25), "l_elbow": (0.3, 0.1),
        "torso": (0.05, 0.5),
    }),
    "squat": (0.8, 0.0, {
        "l_hip_pitch": (0.6, 0.0), "r_hip_pitch": (0.6, 0.0), "l_knee": (0.26, 0.0),
        "r_knee": (0.26, 0.0), "l_ankle": (0.35, 0.5), "r_ankle": (0.35, 0.5),
        "torso": (0.2, 0.0), "l_shoulder_pitch": (0.4, 0.0), "r_shoulder_pitch": (0.4, 0.0),
    }),
}

DEFAULT_LABELS = ("walk", "fast_walk", "wave", "squat")


def default_gait_classes(noise_std: float = 0.02, labels: Sequence[str] = DEFAULT_LABELS):
    pairs = []
    for label in labels:
        fh, vh, ph = _HUMAN_CLASSES[label]
        fr, vr, pr = _ROBOT_CLASSES[label]
        ah, oh = _pattern(HUMAN23, ph)
        ar, orr = _pattern(ROBOT19, pr)
        pairs.append((
            GaitSpec(label, fh, ah, oh, noise_std, vh),
            GaitSpec(label, fr, ar, orr, noise_std, vr),
        ))
    return tuple(pairs)


def default_corpus_spec(
    seed: int = 0,
    sequences_per_class: int = 8,
    frames: int = 240,
    dt: float = 1.0 / 30.0,
    noise_std: float = 0.02,
) -> CorpusSpec:
    return CorpusSpec(
        skeleton_h=HUMAN23,
        skeleton_r=ROBOT19,
        gait_classes=default_gait_classes(noise_std),
        sequences_per_class=sequences_per_class,
        frames=frames,
        dt=dt,
        seed=seed,
    )


def write_corpus(spec: CorpusSpec, out_dir) -> dict:
    """Write ``human/`` and ``robot/`` SMAP-MOTION files plus ``manifest.json``."""
    data_h, data_r = generate_corpus(spec)
    entries = []
    for domain, data in (("human", data_h), ("robot", data_r)):
        os.makedirs(os.path.join(out_dir, domain), exist_ok=True)
        counters: Counter = Counter()
        for seq in data:
            i = counters[seq.label]
            counters[seq.label] += 1
            rel = f"{domain}/{seq.label}_{i}.smap"
            save_motion(seq, os.path.join(out_dir, rel))
            entries.append({"domain": domain, "path": rel, "label": seq.label})
    manifest = {"format": "SMAP-CORPUS v1", "spec": spec.to_dict(), "files": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_corpus(data_dir) -> Tuple[List[MotionSequence], List[MotionSequence]]:
    from .motion import load_motion

    with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    out = {"human": [], "robot": []}
    for e in manifest["files"]:
        out[e["domain"]].append(load_motion(os.path.join(data_dir, e["path"])))
    return out["human"], out["robot"]
