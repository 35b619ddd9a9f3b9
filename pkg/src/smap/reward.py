"""Tracking and regularization rewards for whole-body reference tracking.

Both tables are evaluated term by term into a :class:`RewardBreakdown`, so a
caller can log every raw expression next to its weighted contribution.

Tracking terms split joints and keypoints into upper and lower body with the
skeleton's ``upper_mask``; the upper body carries the larger weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .motion import Skeleton

TRACKING_WEIGHTS = (
    ("dof_pos_upper", 3.0),
    ("dof_pos_lower", 1.0),
    ("keypoint_upper", 2.0),
    ("keypoint_lower", 1.0),
    ("lin_vel", 6.0),
    ("vel_direction", 6.0),
    ("roll_pitch", 1.0),
    ("yaw", 1.0),
)

REGULARIZATION_WEIGHTS = (
    ("dof_acc", -3e-7),
    ("dof_pos_limits", -10.0),
    ("dof_error", -0.5),
    ("energy", -0.001),
    ("lin_vel_z", -1.0),
    ("ang_vel_xy", -0.4),
    ("action_rate", -0.1),
    ("torque", -0.0001),
    ("feet_air_time", 10.0),
    ("feet_velocity", -0.1),
    ("feet_contact_force", -0.003),
    ("stumble", -2.0),
    ("hip_pos_error", -0.2),
    ("waist_roll_pitch_error", -1.0),
    ("ankle_action", -0.1),
)

DIRECTION_VARIANTS = ("as_printed", "one_minus_cos")
AIR_TIME_TARGET = 0.5
STUMBLE_RATIO = 5.0


@dataclass
class RobotState:
    """Per-frame robot state. Foot arrays have one row per foot."""

    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    tau: np.ndarray
    v_lin: np.ndarray
    v_ang: np.ndarray
    roll: float
    pitch: float
    yaw: float
    keypoints: np.ndarray
    action: np.ndarray
    prev_action: np.ndarray
    q0: np.ndarray
    foot_force: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    air_time: np.ndarray = field(default_factory=lambda: np.full(2, AIR_TIME_TARGET))
    first_contact: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=bool))
    foot_velocity: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))

    def check(self, skeleton: Skeleton) -> None:
        n = skeleton.n_dof
        for name in ("q", "qd", "qdd", "tau", "action", "prev_action", "q0"):
            v = np.asarray(getattr(self, name))
            if v.shape != (n,):
                raise ValueError(f"state.{name} has shape {v.shape}, expected ({n},)")
        if np.shape(self.keypoints) != (n, 2):
            raise ValueError(f"state.keypoints must be ({n}, 2)")
        if np.shape(self.v_lin) != (3,) or np.shape(self.v_ang) != (3,):
            raise ValueError("root velocities must be 3-vectors")
        n_feet = np.shape(self.foot_force)[0]
        if (np.shape(self.foot_force) != (n_feet, 2) or np.shape(self.air_time) != (n_feet,)
                or np.shape(self.first_contact) != (n_feet,) or np.shape(self.foot_velocity)[0] != n_feet):
            raise ValueError("foot arrays disagree on the number of feet")


@dataclass
class ReferenceFrame:
    q: np.ndarray
    keypoints: np.ndarray
    v: np.ndarray
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def check(self, skeleton: Skeleton) -> None:
        n = skeleton.n_dof
        if np.shape(self.q) != (n,):
            raise ValueError(f"reference q has shape {np.shape(self.q)}, expected ({n},)")
        if np.shape(self.keypoints) != (n, 2):
            raise ValueError(f"reference keypoints must be ({n}, 2)")
        if np.shape(self.v) != (3,):
            raise ValueError("reference velocity must be a 3-vector")


@dataclass
class RewardBreakdown:
    terms: List[Tuple[str, float, float, float]]

    @property
    def total(self) -> float:
        return float(math.fsum(t[3] for t in self.terms))

    def names(self) -> List[str]:
        return [t[0] for t in self.terms]

    def weighted(self) -> dict:
        return {t[0]: t[3] for t in self.terms}

    def raw(self) -> dict:
        return {t[0]: t[1] for t in self.terms}

    def __add__(self, other: "RewardBreakdown") -> "RewardBreakdown":
        return RewardBreakdown(self.terms + other.terms)


def _build(table, raws) -> RewardBreakdown:
    return RewardBreakdown([(name, float(r), w, float(r) * w) for (name, w), r in zip(table, raws)])


def wrap_angle(a):
    """Map an angle (or array) into [-pi, pi)."""
    return (np.asarray(a) + math.pi) % (2.0 * math.pi) - math.pi


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between u and v; 1 when both are zero, 0 when only one is."""
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 and nv == 0.0:
        return 1.0
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def tracking_reward(state: RobotState, ref: ReferenceFrame, skeleton: Skeleton,
                    direction: str = "as_printed") -> RewardBreakdown:
    if direction not in DIRECTION_VARIANTS:
        raise ValueError(f"unknown direction variant {direction!r}; choose from {DIRECTION_VARIANTS}")
    state.check(skeleton)
    ref.check(skeleton)
    up, low = skeleton.upper_mask, skeleton.lower_mask
    dq = np.asarray(ref.q) - np.asarray(state.q)
    dp = np.asarray(ref.keypoints) - np.asarray(state.keypoints)
    cos = cosine_similarity(ref.v, state.v_lin)
    direction_arg = cos if direction == "as_printed" else 1.0 - cos
    d_rp = np.array([ref.roll - state.roll, ref.pitch - state.pitch])
    raws = (
        math.exp(-0.7 * np.linalg.norm(dq[up])),
        math.exp(-0.7 * np.linalg.norm(dq[low])),
        math.exp(-np.linalg.norm(dp[up])),
        math.exp(-np.linalg.norm(dp[low])),
        math.exp(-4.0 * np.linalg.norm(np.asarray(ref.v) - np.asarray(state.v_lin))),
        math.exp(-4.0 * direction_arg),
        math.exp(-np.linalg.norm(d_rp)),
        math.exp(-abs(float(wrap_angle(ref.yaw - state.yaw)))),
    )
    return _build(TRACKING_WEIGHTS, raws)


def _require_mask(skeleton: Skeleton, name: str) -> np.ndarray:
    mask = getattr(skeleton, name)
    if mask is None:
        raise ValueError(f"skeleton {skeleton.name} has no {name}")
    return np.asarray(mask, dtype=bool)


def regularization_reward(state: RobotState, skeleton: Skeleton) -> RewardBreakdown:
    hip = _require_mask(skeleton, "hip_mask")
    waist = _require_mask(skeleton, "waist_mask")
    ankle = _require_mask(skeleton, "ankle_mask")
    state.check(skeleton)
    q, q0 = np.asarray(state.q), np.asarray(state.q0)
    qd, tau = np.asarray(state.qd), np.asarray(state.tau)
    action = np.asarray(state.action)
    force = np.asarray(state.foot_force, dtype=float)
    touchdown = np.asarray(state.first_contact, dtype=bool)
    raws = (
        np.sum(np.square(state.qdd)),
        np.count_nonzero((q < skeleton.q_min) | (q > skeleton.q_max)),
        np.sum(np.square(q - q0)),
        np.sum(np.square(tau * qd)),
        float(state.v_lin[2]) ** 2,
        np.sum(np.square(state.v_ang[:2])),
        np.sum(np.square(action - state.prev_action)),
        np.linalg.norm(tau),
        np.sum((np.asarray(state.air_time) - AIR_TIME_TARGET) * touchdown),
        np.sum(np.abs(state.foot_velocity)),
        np.sum(np.square(force)),
        np.count_nonzero(force[:, 0] > STUMBLE_RATIO * force[:, 1]),
        np.sum(np.square((q - q0)[hip])),
        np.sum(np.square((q - q0)[waist])),
        np.sum(np.square(action[ankle])),
    )
    return _build(REGULARIZATION_WEIGHTS, raws)


def total_reward(state: RobotState, ref: ReferenceFrame, skeleton: Skeleton,
                 direction: str = "as_printed") -> RewardBreakdown:
    return tracking_reward(state, ref, skeleton, direction) + regularization_reward(state, skeleton)


def quiescent_state(skeleton: Skeleton, q0: Optional[np.ndarray] = None) -> RobotState:
    """A state resting at the default pose with every rate, force and action zero."""
    from .motion import forward_kinematics

    n = skeleton.n_dof
    q0 = np.zeros(n) if q0 is None else np.asarray(q0, dtype=float)
    return RobotState(
        q=q0.copy(), qd=np.zeros(n), qdd=np.zeros(n), tau=np.zeros(n),
        v_lin=np.zeros(3), v_ang=np.zeros(3), roll=0.0, pitch=0.0, yaw=0.0,
        keypoints=forward_kinematics(skeleton, q0), action=np.zeros(n), prev_action=np.zeros(n), q0=q0.copy(),
    )
