"""Tracking metrics over rollout logs, and a summary report for a trained adapter.

Error means are frame-weighted across the whole sequence list. A frame counts
only if it comes before the first failure flag of its log, so the failure
count and the error means describe disjoint things.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .control import RolloutLog
from .motion import MotionSequence, forward_kinematics, format_value, resample


@dataclass
class SequenceMetrics:
    label: Optional[str]
    frames: int
    e_vel: float
    e_mpkpe: float
    e_mpjpe: float
    failed: bool


@dataclass
class MetricsReport:
    e_vel: float
    e_mpkpe: float
    e_mpjpe: float
    fail: int
    frames: int
    sequences: List[SequenceMetrics] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["sequence,label,frames,E_vel,E_mpkpe,E_mpjpe,failed"]
        for i, s in enumerate(self.sequences):
            lines.append(f"{i},{s.label or ''},{s.frames},{format_value(s.e_vel)},{format_value(s.e_mpkpe)},"
                         f"{format_value(s.e_mpjpe)},{int(s.failed)}")
        lines.append(f"all,,{self.frames},{format_value(self.e_vel)},{format_value(self.e_mpkpe)},"
                     f"{format_value(self.e_mpjpe)},{self.fail}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        rows = [("E_vel (m/s)", f"{self.e_vel:.4f}"), ("E_mpkpe (m)", f"{self.e_mpkpe:.4f}"),
                ("E_mpjpe (rad)", f"{self.e_mpjpe:.4f}"), ("fail", str(self.fail)),
                ("sequences", str(len(self.sequences))), ("frames evaluated", str(self.frames))]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def _valid_frames(log: RolloutLog) -> int:
    first = log.failure_frame()
    return log.n_frames if first is None else first


def _reference_for(log: RolloutLog, ref: MotionSequence) -> MotionSequence:
    if ref.skeleton != log.skeleton:
        raise ValueError(f"skeleton mismatch: log {log.skeleton.name} vs reference {ref.skeleton.name}")
    if not math.isclose(ref.dt, log.dt, rel_tol=1e-12):
        ref = resample(ref, log.dt)
    if log.n_frames > ref.n_frames:
        raise ValueError(f"log has {log.n_frames} frames but the reference only {ref.n_frames}")
    return ref


def sequence_errors(log: RolloutLog, ref: MotionSequence) -> SequenceMetrics:
    """Per-sequence error sums turned into means over the frames before failure."""
    ref = _reference_for(log, ref)
    n = _valid_frames(log)
    if n == 0:
        return SequenceMetrics(log.label, 0, 0.0, 0.0, 0.0, log.failed)
    q, q_ref = log.q[:n], ref.frames[:n]
    v_ref = np.zeros((n, 3)) if ref.root_velocity is None else ref.root_velocity[:n]
    e_vel = np.linalg.norm(log.v_lin[:n, :2] - v_ref[:, :2], axis=1)
    kp = forward_kinematics(log.skeleton, q)
    kp_ref = forward_kinematics(log.skeleton, q_ref)
    e_kp = np.linalg.norm(kp - kp_ref, axis=2).mean(axis=1)
    e_j = np.abs(q - q_ref).mean(axis=1)
    return SequenceMetrics(log.label, n, float(e_vel.mean()), float(e_kp.mean()), float(e_j.mean()), log.failed)


def compute_metrics(rollouts: Sequence[RolloutLog], references: Sequence[MotionSequence]) -> MetricsReport:
    if len(rollouts) != len(references):
        raise ValueError(f"{len(rollouts)} rollouts but {len(references)} references")
    per = [sequence_errors(log, ref) for log, ref in zip(rollouts, references)]
    frames = sum(s.frames for s in per)
    fail = sum(int(s.failed) for s in per)

    def weighted(attr):
        if frames == 0:
            return float("nan")
        return math.fsum(getattr(s, attr) * s.frames for s in per) / frames

    return MetricsReport(weighted("e_vel"), weighted("e_mpkpe"), weighted("e_mpjpe"), fail, frames, per)


# ---------------------------------------------------------------------------
# adapter


@dataclass
class AdapterReport:
    mse_h: float
    mse_r: float
    majority_h: Dict[str, int]
    majority_r: Dict[str, int]
    agreement: float
    active_codes: int
    perplexity: float
    histogram: np.ndarray

    def per_class(self) -> Dict[str, bool]:
        return {c: self.majority_h[c] == self.majority_r[c] for c in self.majority_h if c in self.majority_r}

    def to_csv(self) -> str:
        lines = ["metric,value",
                 f"mse_h,{format_value(self.mse_h)}",
                 f"mse_r,{format_value(self.mse_r)}",
                 f"agreement,{format_value(self.agreement)}",
                 f"active_codes,{self.active_codes}",
                 f"perplexity,{format_value(self.perplexity)}"]
        for c in sorted(set(self.majority_h) | set(self.majority_r)):
            lines.append(f"code_h[{c}],{self.majority_h.get(c, -1)}")
            lines.append(f"code_r[{c}],{self.majority_r.get(c, -1)}")
        return "\n".join(lines) + "\n"


def code_agreement(majority_h: Dict[str, int], majority_r: Dict[str, int]) -> float:
    """Fraction of classes (present in both domains) whose majority codes coincide."""
    common = sorted(set(majority_h) & set(majority_r))
    if not common:
        return 0.0
    return sum(majority_h[c] == majority_r[c] for c in common) / len(common)


def adapter_report(model, human: Sequence[MotionSequence], robot: Sequence[MotionSequence],
                   eval_human: Optional[Sequence[MotionSequence]] = None,
                   eval_robot: Optional[Sequence[MotionSequence]] = None) -> AdapterReport:
    """Reconstruction error (on ``eval_*`` when given), per-class majority codes and codebook usage."""
    from . import adapter as A

    for seq in list(human) + list(robot):
        if seq.label is None:
            raise ValueError("adapter_report needs a labeled corpus")
    mse_h = A.reconstruction_mse(model, "h", eval_human if eval_human is not None else human)
    mse_r = A.reconstruction_mse(model, "r", eval_robot if eval_robot is not None else robot)
    ih, oh = A.dataset_indices(model, "h", human)
    ir, orr = A.dataset_indices(model, "r", robot)
    mh = A.majority_codes(ih, oh, [s.label for s in human])
    mr = A.majority_codes(ir, orr, [s.label for s in robot])
    cm = A.codebook_metrics(model, human, robot)
    return AdapterReport(float(mse_h), float(mse_r), mh, mr, code_agreement(mh, mr),
                         int(cm.active_count), float(cm.perplexity), cm.histogram)
