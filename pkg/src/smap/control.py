"""Toy humanoid tracking environment, privileged teacher training and DAgger distillation.

The environment is a bank of independent PD-driven joints (one double
integrator per joint) plus kinematic proxies for what a floating base would
report: roll and pitch are linear combinations of hip, ankle and torso angles,
yaw follows the hip-yaw difference, forward speed shrinks with lower-body
tracking error, and foot contacts follow a gait clock. Every step produces a
:class:`~smap.reward.RobotState` snapshot, so the reward tables apply directly.

Actions are joint targets expressed as offsets from the default pose ``q0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .motion import MotionSequence, Skeleton, forward_kinematics, format_value, resample
from .nn import Tensor
from .reward import ReferenceFrame, RobotState, total_reward, wrap_angle
from .synth import joint_names

N_FEET = 2
BODY_WEIGHT = 20.0  # N, shared between feet in contact
PUSH_LEVER = 0.05  # m, converts a push impulse into hip-roll joint velocity
STANCE_FRACTION = 0.6


@dataclass
class EnvConfig:
    dt: float = 1.0 / 50.0
    kp: float = 40.0
    kd: float = 2.0
    tau_max: float = 30.0
    fail_threshold: float = 0.8
    tilt_limit: float = 1.0
    limit_margin: float = 0.5
    gait_frequency: float = 1.0
    randomize: bool = True
    mass_range: Tuple[float, float] = (0.8, 1.2)
    friction_range: Tuple[float, float] = (0.0, 0.2)
    motor_range: Tuple[float, float] = (0.9, 1.1)
    push_impulse: float = 5.0
    push_time: float = 0.5
    max_steps: Optional[int] = None
    direction: str = "as_printed"

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DynamicsParams:
    mass_scale: np.ndarray
    friction: float
    motor_strength: float
    push: float = 0.0

    @classmethod
    def nominal(cls, n_dof: int) -> "DynamicsParams":
        return cls(np.ones(n_dof), 0.0, 1.0, 0.0)

    @classmethod
    def sample(cls, n_dof: int, cfg: EnvConfig, rng: np.random.Generator) -> "DynamicsParams":
        if not cfg.randomize:
            return cls.nominal(n_dof)
        mass = rng.uniform(*cfg.mass_range, size=n_dof)
        friction = float(rng.uniform(*cfg.friction_range))
        motor = float(rng.uniform(*cfg.motor_range))
        push = float(cfg.push_impulse * rng.choice([-1.0, 0.0, 1.0]))
        return cls(mass, friction, motor, push)

    def vector(self) -> np.ndarray:
        """Privileged dynamics block (push scaled to order one)."""
        return np.concatenate([self.mass_scale, [self.friction, self.motor_strength, self.push / 5.0]])


@dataclass
class ToyEnvState:
    q: np.ndarray
    qd: np.ndarray
    yaw: float
    root_xy: np.ndarray
    contacts: np.ndarray
    air_time: np.ndarray
    step: int
    prev_action: np.ndarray

    def copy(self) -> "ToyEnvState":
        return ToyEnvState(self.q.copy(), self.qd.copy(), self.yaw, self.root_xy.copy(), self.contacts.copy(),
                           self.air_time.copy(), self.step, self.prev_action.copy())


# ---------------------------------------------------------------------------
# kinematic proxies


@dataclass(frozen=True)
class BaseProxies:
    """Linear maps from joint angles to base roll, pitch and yaw."""

    roll: np.ndarray
    pitch: np.ndarray
    yaw: np.ndarray
    hip_pitch: Tuple[int, int]
    ankle: Tuple[int, int]

    @classmethod
    def for_skeleton(cls, skeleton: Skeleton) -> "BaseProxies":
        names = joint_names(skeleton)
        idx = {n: i for i, n in enumerate(names)}
        n = skeleton.n_dof
        roll, pitch, yaw = np.zeros(n), np.zeros(n), np.zeros(n)

        def find(*cands):
            for c in cands:
                if c in idx:
                    return idx[c]
            return None

        sides = []
        for s in "lr":
            sides.append((find(f"{s}_hip_roll"), find(f"{s}_hip_pitch"),
                          find(f"{s}_ankle", f"{s}_ankle_pitch"), find(f"{s}_hip_yaw")))
        torso = find("torso", "spine_pitch")
        for hr, hp, an, hy in sides:
            if hr is not None:
                roll[hr] = 0.5
            if hp is not None:
                pitch[hp] = 0.125
            if an is not None:
                pitch[an] = 0.125
        if torso is not None:
            pitch[torso] = 0.5
        if sides[0][3] is not None and sides[1][3] is not None:
            yaw[sides[0][3]], yaw[sides[1][3]] = 0.5, -0.5
        hip_pitch = tuple(s[1] if s[1] is not None else 0 for s in sides)
        ankle = tuple(s[2] if s[2] is not None else 0 for s in sides)
        return cls(roll, pitch, yaw, hip_pitch, ankle)


def gait_contacts(t: float, frequency: float) -> np.ndarray:
    """Left foot stands for the first 60% of each cycle, right foot half a cycle later."""
    phase = (t * frequency) % 1.0
    left = phase < STANCE_FRACTION
    right = ((phase + 0.5) % 1.0) < STANCE_FRACTION
    return np.array([left, right])


# ---------------------------------------------------------------------------
# environment


@dataclass
class StepResult:
    state: ToyEnvState
    snapshot: RobotState
    reference: ReferenceFrame
    done: bool
    failure: bool


class ToyEnv:
    """One episode tracks one reference sequence (resampled to the env rate)."""

    def __init__(self, skeleton: Skeleton, config: Optional[EnvConfig] = None):
        self.skeleton = skeleton
        self.config = config or EnvConfig()
        self.proxies = BaseProxies.for_skeleton(skeleton)
        self.q0 = np.zeros(skeleton.n_dof)
        self.reference: Optional[MotionSequence] = None
        self.params = DynamicsParams.nominal(skeleton.n_dof)
        self._ref_v = None
        self._ref_qd = None

    # -- episode setup --------------------------------------------------------
    def prepare(self, reference: MotionSequence) -> MotionSequence:
        if reference.skeleton != self.skeleton:
            raise ValueError(f"reference skeleton {reference.skeleton.name} != env skeleton {self.skeleton.name}")
        ref = resample(reference, self.config.dt)
        if self.config.max_steps is not None and ref.n_frames > self.config.max_steps + 1:
            ref = MotionSequence(ref.skeleton, ref.dt, ref.frames[: self.config.max_steps + 1], ref.label,
                                 None if ref.root_velocity is None else ref.root_velocity[: self.config.max_steps + 1])
        return ref

    def reset(self, reference: MotionSequence, params: Optional[DynamicsParams] = None) -> ToyEnvState:
        ref = self.prepare(reference)
        self.reference = ref
        self.params = params or DynamicsParams.nominal(self.skeleton.n_dof)
        n = ref.n_frames
        self._ref_v = np.zeros((n, 3)) if ref.root_velocity is None else ref.root_velocity.copy()
        self._ref_qd = np.gradient(ref.frames, ref.dt, axis=0) if n > 1 else np.zeros_like(ref.frames)
        self._ref_qdd = np.gradient(self._ref_qd, ref.dt, axis=0) if n > 1 else np.zeros_like(ref.frames)
        q = ref.frames[0].copy()
        qd = self._ref_qd[0].copy()
        contacts = gait_contacts(0.0, self.config.gait_frequency)
        return ToyEnvState(q, qd, float(self.proxies.yaw @ q), np.zeros(2), contacts, np.zeros(N_FEET), 0,
                           np.zeros(self.skeleton.n_dof))

    @property
    def n_steps(self) -> int:
        return 0 if self.reference is None else max(0, self.reference.n_frames - 1)

    def reference_frame(self, t: int) -> ReferenceFrame:
        q = self.reference.frames[t]
        p = self.proxies
        return ReferenceFrame(q=q, keypoints=forward_kinematics(self.skeleton, q), v=self._ref_v[t],
                              roll=float(p.roll @ q), pitch=float(p.pitch @ q), yaw=float(p.yaw @ q))

    def goal(self, t: int) -> np.ndarray:
        """Next reference frame: pose, joint velocity and acceleration, forward speed.

        Velocity and acceleration are scaled by kd/kp and 1/kp, the factors that
        turn them into joint-target corrections for a unit-inertia PD joint.
        """
        t1 = min(t + 1, self.reference.n_frames - 1)
        c = self.config
        return np.concatenate([self.reference.frames[t1], (c.kd / c.kp) * self._ref_qd[t1],
                               self._ref_qdd[t1] / c.kp, [self._ref_v[t1, 0]]])

    def push_step(self) -> int:
        return int(round(self.config.push_time * self.n_steps))

    # -- dynamics -----------------------------------------------------------------
    def step(self, state: ToyEnvState, action) -> StepResult:
        if self.reference is None:
            raise RuntimeError("call reset() before step()")
        ref_t = min(state.step + 1, self.reference.n_frames - 1)
        new_state, snap, failure = env_step(state, action, self.params, self.config, self.skeleton, self.proxies,
                                            self.q0, self.reference.frames[ref_t], self._ref_v[ref_t, 0],
                                            push=(self.params.push if state.step == self.push_step() else 0.0))
        done = failure or new_state.step >= self.n_steps
        return StepResult(new_state, snap, self.reference_frame(ref_t), done, failure)


def env_step(state: ToyEnvState, action, params: DynamicsParams, cfg: EnvConfig, skeleton: Skeleton,
             proxies: Optional[BaseProxies] = None, q0: Optional[np.ndarray] = None,
             q_ref: Optional[np.ndarray] = None, v_ref: float = 0.0, push: float = 0.0):
    """Advance one control period. Returns (state', RobotState snapshot, failure)."""
    n = skeleton.n_dof
    a = np.asarray(action, dtype=float)
    if a.shape != (n,):
        raise ValueError(f"action has shape {a.shape}, expected ({n},)")
    if not np.all(np.isfinite(a)):
        raise ValueError("action contains non-finite values")
    proxies = proxies or BaseProxies.for_skeleton(skeleton)
    q0 = np.zeros(n) if q0 is None else q0
    dt = cfg.dt

    tau = cfg.kp * params.motor_strength * (q0 + a - state.q) - cfg.kd * state.qd
    tau = np.clip(tau, -cfg.tau_max, cfg.tau_max)
    qdd = tau / params.mass_scale - params.friction * state.qd
    qd = state.qd + dt * qdd
    if push:
        roll_joints = proxies.roll != 0
        qd = qd + roll_joints * (push * PUSH_LEVER / params.mass_scale)
    q = state.q + dt * qd
    lo, hi = skeleton.q_min - cfg.limit_margin, skeleton.q_max + cfg.limit_margin
    clamped = (q < lo) | (q > hi)
    q = np.clip(q, lo, hi)
    qd = np.where(clamped, 0.0, qd)
    qdd = (qd - state.qd) / dt

    t_next = (state.step + 1) * dt
    contacts = gait_contacts(t_next, cfg.gait_frequency)
    touchdown = contacts & ~state.contacts
    air = np.where(contacts, 0.0, state.air_time + dt)
    air_at_touchdown = np.where(touchdown, state.air_time + dt, np.where(contacts, 0.5, air))
    # Before touchdown the value reported to the reward is the running air time;
    # feet already standing report the neutral 0.5 so the air-time term reads 0.

    lower = skeleton.lower_mask
    err_lower = 0.0 if q_ref is None else float(np.linalg.norm((q - q_ref)[lower]))
    vx = v_ref * math.exp(-err_lower)
    vz = 0.05 * float(np.mean(qd[lower])) if lower.any() else 0.0
    yaw = float(proxies.yaw @ q)
    root_xy = state.root_xy + dt * np.array([vx * math.cos(yaw), vx * math.sin(yaw)])
    v_lin = np.array([vx, 0.0, vz])
    v_ang = np.array([proxies.roll @ qd, proxies.pitch @ qd, proxies.yaw @ qd])
    roll, pitch = float(proxies.roll @ q), float(proxies.pitch @ q)

    n_contact = max(1, int(contacts.sum()))
    force = np.zeros((N_FEET, 2))
    foot_vel = np.zeros((N_FEET, 2))
    for f in range(N_FEET):
        hp, an = proxies.hip_pitch[f], proxies.ankle[f]
        if contacts[f]:
            force[f] = (0.5 * tau[an], BODY_WEIGHT / n_contact)
        else:
            foot_vel[f] = (vx + 0.8 * qd[hp], 0.4 * qd[an])

    failure = bool(abs(roll) > cfg.tilt_limit or abs(pitch) > cfg.tilt_limit)
    if q_ref is not None:
        failure = failure or bool(np.any(np.abs(q - q_ref) > cfg.fail_threshold))

    snap = RobotState(
        q=q, qd=qd, qdd=qdd, tau=tau, v_lin=v_lin, v_ang=v_ang, roll=roll, pitch=pitch, yaw=yaw,
        keypoints=forward_kinematics(skeleton, q), action=a.copy(), prev_action=state.prev_action.copy(), q0=q0,
        foot_force=force, air_time=air_at_touchdown, first_contact=touchdown, foot_velocity=foot_vel,
    )
    new_state = ToyEnvState(q, qd, yaw, root_xy, contacts, air, state.step + 1, a.copy())
    return new_state, snap, failure


# ---------------------------------------------------------------------------
# observations


def proprio(state: ToyEnvState, env: ToyEnv, yaw_target: float) -> np.ndarray:
    """Yaw rate, roll, pitch, sin/cos of the yaw error, joint positions, scaled joint velocities."""
    p = env.proxies
    dyaw = float(wrap_angle(yaw_target - state.yaw))
    return np.concatenate([[0.25 * float(p.yaw @ state.qd), float(p.roll @ state.q), float(p.pitch @ state.q),
                            math.sin(dyaw), math.cos(dyaw)], state.q, 0.1 * state.qd])


def proprio_dim(n_dof: int) -> int:
    return 5 + 2 * n_dof


def goal_dim(n_dof: int) -> int:
    return 3 * n_dof + 1


def privileged_dim(n_dof: int) -> int:
    return N_FEET + n_dof + 3


@dataclass(frozen=True)
class ObsSpec:
    n_dof: int
    history: int
    privileged: bool

    @property
    def dim(self) -> int:
        d = proprio_dim(self.n_dof) * (self.history + 1) + goal_dim(self.n_dof)
        return d + (privileged_dim(self.n_dof) if self.privileged else 0)

    @property
    def goal_slice(self) -> slice:
        start = proprio_dim(self.n_dof) * (self.history + 1)
        return slice(start, start + goal_dim(self.n_dof))

    @property
    def privileged_slice(self) -> Optional[slice]:
        if not self.privileged:
            return None
        start = self.goal_slice.stop
        return slice(start, start + privileged_dim(self.n_dof))


class ObsBuilder:
    """Keeps the proprioceptive history for one episode (zero-padded at the start)."""

    def __init__(self, spec: ObsSpec):
        self.spec = spec
        self.past: List[np.ndarray] = []

    def reset(self):
        self.past = []

    def build(self, state: ToyEnvState, env: ToyEnv, commit: bool = True) -> np.ndarray:
        t = state.step
        yaw_target = env.reference_frame(min(t + 1, env.reference.n_frames - 1)).yaw
        cur = proprio(state, env, yaw_target)
        H = self.spec.history
        hist = self.past[-H:] if H else []
        pad = [np.zeros_like(cur)] * (H - len(hist))
        parts = [cur] + list(reversed(hist)) + pad
        obs = [np.concatenate(parts), env.goal(t)]
        if self.spec.privileged:
            obs.append(privileged_block(state, env))
        if commit:
            self.past.append(cur)
        return np.concatenate(obs)


def privileged_block(state: ToyEnvState, env: ToyEnv) -> np.ndarray:
    return np.concatenate([state.contacts.astype(float), env.params.vector()])


# ---------------------------------------------------------------------------
# policies


@dataclass
class Policy:
    """MLP policy on top of a linear feedforward path from the goal block.

    The goal block holds the next reference pose plus its velocity and
    acceleration, scaled so that unit gains give the target that makes a
    nominal (unit mass, unit motor) PD joint follow the reference. A teacher
    rescales that path with its privileged mass and motor strength; a student
    has to assume nominal values. The gains ``ff.v`` and ``ff.a`` are shared
    scalars that start at zero, so an untrained policy is a plain pose follower.

    mean(obs) = goal_q + (ff.v * goal_qd + ff.a * mass * goal_qdd) / motor + W2 tanh(W1 obs + b1) + b2
    """

    params: nn.ParamSet
    kind: str
    spec: ObsSpec
    hidden: int

    @property
    def history(self) -> int:
        return self.spec.history

    def _feedforward_inputs(self, obs):
        obs = np.asarray(obs)
        n, start = self.spec.n_dof, self.spec.goal_slice.start
        q = obs[..., start:start + n]
        qd = obs[..., start + n:start + 2 * n]
        qdd = obs[..., start + 2 * n:start + 3 * n]
        priv = self.spec.privileged_slice
        if priv is not None:
            mass = obs[..., priv.start + N_FEET:priv.start + N_FEET + n]
            motor = obs[..., priv.start + N_FEET + n + 1:priv.start + N_FEET + n + 2]
            qd, qdd = qd / motor, mass * qdd / motor
        return q, qd, qdd

    def prior(self, obs, gains: Optional[np.ndarray] = None) -> np.ndarray:
        """Feedforward part of the mean; ``gains`` overrides (ff.v, ff.a)."""
        q, qd, qdd = self._feedforward_inputs(obs)
        gv, ga = self.gains() if gains is None else gains
        return q + gv * qd + ga * qdd

    def gains(self) -> np.ndarray:
        return np.array([self.params["ff.v"].data[0], self.params["ff.a"].data[0]])

    def mean_np(self, obs: np.ndarray, gains: Optional[np.ndarray] = None) -> np.ndarray:
        p = self.params
        h = np.tanh(obs @ p["l1.w"].data.T + p["l1.b"].data)
        out = self.prior(obs, gains) + h @ p["l2.w"].data.T + p["l2.b"].data
        if "skip.w" in p:
            out = out + obs @ p["skip.w"].data.T + p["skip.b"].data
        return out

    def mean(self, obs) -> Tensor:
        p = self.params
        obs_t = nn.as_tensor(obs)
        h = nn.tanh(nn.dense(obs_t, p["l1.w"], p["l1.b"]))
        q, qd, qdd = self._feedforward_inputs(obs)
        ff = nn.mul(p["ff.v"], Tensor(qd)) + nn.mul(p["ff.a"], Tensor(qdd))
        out = nn.dense(h, p["l2.w"], p["l2.b"]) + ff + Tensor(q)
        if "skip.w" in p:
            out = out + nn.dense(obs_t, p["skip.w"], p["skip.b"])
        return out

    def copy(self) -> "Policy":
        return Policy(self.params.copy(), self.kind, self.spec, self.hidden)


def init_policy(spec: ObsSpec, kind: str, hidden: int = 64, seed: int = 0, log_std: float = math.log(0.05),
                skip: bool = False) -> Policy:
    """Fresh policy; ``skip`` adds a zero-initialized linear map from the observation to the action."""
    rng = np.random.default_rng([seed, 0x9011C7])
    p = nn.ParamSet()
    nn.init_dense(p, "l1", spec.dim, hidden, rng)
    nn.init_dense(p, "l2", hidden, spec.n_dof, rng, scale=0.1)
    p.add("ff.v", np.zeros(1))
    p.add("ff.a", np.zeros(1))
    if skip:
        p.add("skip.w", np.zeros((spec.n_dof, spec.dim)))
        p.add("skip.b", np.zeros(spec.n_dof))
    if kind == "teacher":
        p.add("log_std", np.full(spec.n_dof, log_std))
    return Policy(p, kind, spec, hidden)


class RandomPolicy:
    """Uniform random joint offsets; the reference point for 'better than random'."""

    def __init__(self, n_dof: int, scale: float = 0.5, seed: int = 0):
        self.n_dof = n_dof
        self.scale = scale
        self.rng = np.random.default_rng(seed)
        self.spec = ObsSpec(n_dof, 0, False)

    def mean_np(self, obs):
        return self.rng.uniform(-self.scale, self.scale, size=self.n_dof)


# ---------------------------------------------------------------------------
# rollouts and logs


ROLLOUT_MAGIC = "#SMAP-ROLLOUT v1"


@dataclass
class RolloutLog:
    """Per-frame record. Frame 0 is the reset state; frame t pairs with reference frame t."""

    skeleton: Skeleton
    dt: float
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    tau: np.ndarray
    v_lin: np.ndarray
    v_ang: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray
    yaw: np.ndarray
    action: np.ndarray
    contacts: np.ndarray
    fail: np.ndarray
    foot_force: np.ndarray
    foot_velocity: np.ndarray
    air_time: np.ndarray
    touchdown: np.ndarray
    label: Optional[str] = None
    rewards: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return self.q.shape[0]

    @property
    def failed(self) -> bool:
        return bool(np.any(self.fail))

    def failure_frame(self) -> Optional[int]:
        idx = np.flatnonzero(self.fail)
        return int(idx[0]) if idx.size else None

    def snapshot(self, t: int, q0: Optional[np.ndarray] = None) -> RobotState:
        n = self.skeleton.n_dof
        prev = self.action[t - 1] if t > 0 else np.zeros(n)
        return RobotState(
            q=self.q[t], qd=self.qd[t], qdd=self.qdd[t], tau=self.tau[t], v_lin=self.v_lin[t], v_ang=self.v_ang[t],
            roll=float(self.roll[t]), pitch=float(self.pitch[t]), yaw=float(self.yaw[t]),
            keypoints=forward_kinematics(self.skeleton, self.q[t]), action=self.action[t], prev_action=prev,
            q0=np.zeros(n) if q0 is None else q0, foot_force=self.foot_force[t], air_time=self.air_time[t],
            first_contact=self.touchdown[t].astype(bool), foot_velocity=self.foot_velocity[t],
        )

    @classmethod
    def empty(cls, skeleton: Skeleton, dt: float, label=None) -> "RolloutLog":
        n = skeleton.n_dof
        z = lambda *s: np.zeros((0,) + s)  # noqa: E731
        return cls(skeleton, dt, z(n), z(n), z(n), z(n), z(3), z(3), z(), z(), z(), z(n), z(N_FEET), z(),
                   z(N_FEET, 2), z(N_FEET, 2), z(N_FEET), z(N_FEET), label, z())

    @classmethod
    def from_frames(cls, skeleton: Skeleton, dt: float, frames: List[dict], label=None) -> "RolloutLog":
        if not frames:
            return cls.empty(skeleton, dt, label)
        cols = {k: np.array([f[k] for f in frames]) for k in frames[0]}
        return cls(skeleton, dt, label=label, **cols)


def _frame_record(snap: RobotState, contacts, fail: bool, reward: float) -> dict:
    return dict(q=snap.q, qd=snap.qd, qdd=snap.qdd, tau=snap.tau, v_lin=snap.v_lin, v_ang=snap.v_ang,
                roll=snap.roll, pitch=snap.pitch, yaw=snap.yaw, action=snap.action,
                contacts=np.asarray(contacts, dtype=float), fail=float(fail), foot_force=snap.foot_force,
                foot_velocity=snap.foot_velocity, air_time=snap.air_time,
                touchdown=np.asarray(snap.first_contact, dtype=float), rewards=reward)


def _reset_record(state: ToyEnvState, env: ToyEnv) -> dict:
    p = env.proxies
    n = env.skeleton.n_dof
    v = env._ref_v[0]
    snap = RobotState(
        q=state.q, qd=state.qd, qdd=np.zeros(n), tau=np.zeros(n), v_lin=np.array([v[0], 0.0, 0.0]),
        v_ang=np.array([p.roll @ state.qd, p.pitch @ state.qd, p.yaw @ state.qd]), roll=float(p.roll @ state.q),
        pitch=float(p.pitch @ state.q), yaw=state.yaw, keypoints=forward_kinematics(env.skeleton, state.q),
        action=np.zeros(n), prev_action=np.zeros(n), q0=env.q0, foot_force=np.zeros((N_FEET, 2)),
        air_time=np.full(N_FEET, 0.5), first_contact=np.zeros(N_FEET, dtype=bool),
        foot_velocity=np.zeros((N_FEET, 2)),
    )
    return _frame_record(snap, state.contacts, False, 0.0)


@dataclass
class Transition:
    obs: np.ndarray
    teacher_obs: Optional[np.ndarray]
    action: np.ndarray
    reward: float


def run_episode(env: ToyEnv, reference: MotionSequence, params: DynamicsParams,
                act: Callable[[np.ndarray], np.ndarray], spec: ObsSpec,
                teacher_spec: Optional[ObsSpec] = None, record: bool = True):
    """Roll one episode. ``act`` maps an observation (built with ``spec``) to an action.

    Returns (log, transitions, total reward).
    """
    state = env.reset(reference, params)
    builder = ObsBuilder(spec)
    tbuilder = ObsBuilder(teacher_spec) if teacher_spec is not None else None
    frames = [_reset_record(state, env)] if record else []
    trans: List[Transition] = []
    total = 0.0
    for _ in range(env.n_steps):
        obs = builder.build(state, env)
        tobs = tbuilder.build(state, env) if tbuilder is not None else None
        a = act(obs)
        res = env.step(state, a)
        r = total_reward(res.snapshot, res.reference, env.skeleton, env.config.direction).total
        total += r
        trans.append(Transition(obs, tobs, np.asarray(a, dtype=float), r))
        if record:
            frames.append(_frame_record(res.snapshot, res.state.contacts, res.failure, r))
        state = res.state
        if res.done:
            break
    log = RolloutLog.from_frames(env.skeleton, env.config.dt, frames, reference.label) if record else None
    return log, trans, total


def rollout(policy, env: ToyEnv, reference: MotionSequence, params: Optional[DynamicsParams] = None) -> RolloutLog:
    """Deterministic rollout of a policy's mean action."""
    if reference.n_frames == 0:
        return RolloutLog.empty(env.skeleton, env.config.dt, reference.label)
    params = params or DynamicsParams.nominal(env.skeleton.n_dof)
    log, _, _ = run_episode(env, reference, params, policy.mean_np, policy.spec)
    return log


def _column_names(skeleton: Skeleton) -> List[str]:
    names = joint_names(skeleton)
    cols = [f"q_{n}" for n in names] + [f"qd_{n}" for n in names] + [f"tau_{n}" for n in names]
    cols += ["vlin_x", "vlin_y", "vlin_z", "vang_x", "vang_y", "vang_z", "roll", "pitch", "yaw"]
    cols += [f"action_{n}" for n in names] + ["contact_l", "contact_r", "fail"]
    cols += [f"qdd_{n}" for n in names]
    cols += ["force_l_x", "force_l_z", "force_r_x", "force_r_z"]
    cols += ["footvel_l_x", "footvel_l_z", "footvel_r_x", "footvel_r_z"]
    cols += ["air_l", "air_r", "touchdown_l", "touchdown_r"]
    return cols


def _log_matrix(log: RolloutLog) -> np.ndarray:
    T = log.n_frames
    return np.concatenate([
        log.q, log.qd, log.tau, log.v_lin, log.v_ang, log.roll[:, None], log.pitch[:, None], log.yaw[:, None],
        log.action, log.contacts, log.fail[:, None], log.qdd, log.foot_force.reshape(T, -1),
        log.foot_velocity.reshape(T, -1), log.air_time, log.touchdown,
    ], axis=1) if T else np.zeros((0, len(_column_names(log.skeleton))))


def serialize_rollout(log: RolloutLog) -> str:
    cols = _column_names(log.skeleton)
    label = "" if log.label is None else f" label={log.label}"
    lines = [f"{ROLLOUT_MAGIC} skeleton={log.skeleton.name} dt={log.dt!r} frames={log.n_frames} "
             f"columns={len(cols)}{label}", ",".join(cols)]
    for row in _log_matrix(log):
        lines.append(",".join(format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def parse_rollout(text: str) -> RolloutLog:
    from .motion import get_skeleton

    lines = text.rstrip("\n").split("\n")
    head = lines[0].split()
    if not lines[0].startswith(ROLLOUT_MAGIC):
        raise ValueError("line 1: not a SMAP-ROLLOUT v1 document")
    kv = dict(tok.split("=", 1) for tok in head[2:])
    skel = get_skeleton(kv["skeleton"])
    dt = float(kv["dt"])
    frames = int(kv["frames"])
    cols = _column_names(skel)
    if lines[1].split(",") != cols:
        raise ValueError("line 2: unexpected column header")
    body = lines[2:]
    if len(body) != frames:
        raise ValueError(f"frame-count mismatch: header says {frames}, found {len(body)}")
    data = np.array([[float(v) for v in ln.split(",")] for ln in body]) if frames else np.zeros((0, len(cols)))
    if data.shape[1] != len(cols):
        raise ValueError("column-count mismatch")
    n = skel.n_dof
    T = frames
    i = 0

    def take(k):
        nonlocal i
        out = data[:, i:i + k]
        i += k
        return out

    q, qd, tau = take(n), take(n), take(n)
    v_lin, v_ang = take(3), take(3)
    roll, pitch, yaw = take(1)[:, 0], take(1)[:, 0], take(1)[:, 0]
    action, contacts, fail = take(n), take(2), take(1)[:, 0]
    qdd = take(n)
    force = take(4).reshape(T, 2, 2)
    fvel = take(4).reshape(T, 2, 2)
    air, td = take(2), take(2)
    return RolloutLog(skel, dt, q, qd, qdd, tau, v_lin, v_ang, roll, pitch, yaw, action, contacts, fail, force, fvel,
                      air, td, kv.get("label"))


def save_rollout(log: RolloutLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_rollout(log))


def load_rollout(path) -> RolloutLog:
    with open(path, encoding="utf-8") as fh:
        return parse_rollout(fh.read())


# ---------------------------------------------------------------------------
# reference pools


_RETARGET_ALIASES = {"ankle": "ankle_pitch", "torso": "spine_pitch"}


def linear_retarget_map(source: Skeleton, target: Skeleton) -> np.ndarray:
    """Sparse (target x source) matrix copying each target joint from its nearest-named source joint."""
    src = {n: i for i, n in enumerate(joint_names(source))}
    M = np.zeros((target.n_dof, source.n_dof))
    for j, name in enumerate(joint_names(target)):
        side, _, base = name.partition("_") if name[:2] in ("l_", "r_") else ("", "", name)
        cand = [name]
        alias = _RETARGET_ALIASES.get(base)
        if alias:
            cand.append(f"{side}_{alias}" if side else alias)
        for c in cand:
            if c in src:
                M[j, src[c]] = 1.0
                break
    return M


def retarget_linear(seq: MotionSequence, target: Skeleton) -> MotionSequence:
    M = linear_retarget_map(seq.skeleton, target)
    return MotionSequence(target, seq.dt, seq.frames @ M.T, seq.label, seq.root_velocity)


@dataclass
class CurriculumSchedule:
    w_max: float = 0.5
    enabled: bool = True

    def weight(self, progress: float) -> float:
        p = min(max(float(progress), 0.0), 1.0)
        return self.w_max * p if self.enabled else self.w_max


class PoolCycler:
    """Draws from a pool in reshuffled passes: uniform per draw, balanced over a pass."""

    def __init__(self, pool: Sequence[MotionSequence], rng: np.random.Generator):
        if not pool:
            raise ValueError("empty reference pool")
        self.pool = pool
        self.rng = rng
        self.order: List[int] = []

    def draw(self) -> MotionSequence:
        if not self.order:
            self.order = list(self.rng.permutation(len(self.pool)))
        return self.pool[self.order.pop()]


def curriculum_sample(adapted_refs: Sequence[MotionSequence], retargeted_refs: Sequence[MotionSequence],
                      schedule: CurriculumSchedule, progress: float, rng: np.random.Generator) -> MotionSequence:
    if not adapted_refs or not retargeted_refs:
        raise ValueError("empty reference pool")
    if rng.random() < schedule.weight(progress):
        return retargeted_refs[rng.integers(len(retargeted_refs))]
    return adapted_refs[rng.integers(len(adapted_refs))]


# ---------------------------------------------------------------------------
# teacher training


@dataclass
class TeacherConfig:
    episodes: int = 200
    hidden: int = 64
    history: int = 0
    lr: float = 3e-4
    value_lr: float = 1e-3
    gamma: float = 0.98
    init_log_std: float = math.log(0.05)
    grad_clip: float = 1.0
    positive_reward: bool = True
    gain_lr: float = 0.05
    gain_std: float = 0.1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown teacher config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingCurve:
    episode: List[int] = field(default_factory=list)
    reward: List[float] = field(default_factory=list)
    length: List[int] = field(default_factory=list)
    failed: List[int] = field(default_factory=list)
    retargeted: List[int] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["episode,reward,length,failed,retargeted"]
        for e, r, n, f, rt in zip(self.episode, self.reward, self.length, self.failed, self.retargeted):
            lines.append(f"{e},{format_value(r)},{n},{f},{rt}")
        return "\n".join(lines) + "\n"


def _value_net(dim: int, hidden: int, seed: int) -> nn.ParamSet:
    rng = np.random.default_rng([seed, 0x7A1E])
    p = nn.ParamSet()
    nn.init_dense(p, "v1", dim, hidden, rng)
    nn.init_dense(p, "v2", hidden, 1, rng)
    return p


def _value(p: nn.ParamSet, obs) -> Tensor:
    h = nn.tanh(nn.dense(obs, p["v1.w"], p["v1.b"]))
    return nn.dense(h, p["v2.w"], p["v2.b"]).reshape(-1)


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros_like(rewards, dtype=float)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def teacher_spec(n_dof: int, history: int = 0) -> ObsSpec:
    return ObsSpec(n_dof, history, True)


def train_teacher(skeleton: Skeleton, adapted_refs: Sequence[MotionSequence],
                  retargeted_refs: Sequence[MotionSequence], schedule: CurriculumSchedule,
                  config: Optional[TeacherConfig] = None, env_config: Optional[EnvConfig] = None,
                  progress_cb=None) -> Tuple[Policy, TrainingCurve]:
    """Policy-gradient teacher training on mirrored episode pairs.

    Both episodes of a pair share the reference, the dynamics sample and the
    action-noise stream; the feedforward gains are perturbed by +xi and -xi.
    The return difference gives a gain gradient free of the between-reference
    variance. The network and log_std take a per-step REINFORCE update over
    the pair with a learned value baseline and normalized advantages.
    """
    cfg = config or TeacherConfig()
    env = ToyEnv(skeleton, env_config)
    spec = teacher_spec(skeleton.n_dof, cfg.history)
    policy = init_policy(spec, "teacher", cfg.hidden, cfg.seed, cfg.init_log_std)
    value = _value_net(spec.dim, cfg.hidden, cfg.seed)
    gain_opt = nn.ParamSet({"gains": policy.gains()})
    rng = np.random.default_rng([cfg.seed, 0x7EAC])
    pools = (PoolCycler(adapted_refs, rng), PoolCycler(retargeted_refs, rng))
    curve = TrainingCurve()
    n_updates = 0
    ep = 0
    while ep < cfg.episodes:
        progress = ep / max(1, cfg.episodes - 1)
        from_retargeted = int(rng.random() < schedule.weight(progress))
        ref = pools[from_retargeted].draw()
        params = DynamicsParams.sample(skeleton.n_dof, env.config, rng)
        xi = rng.standard_normal(2)
        noise_seed = int(rng.integers(2 ** 31))
        std = np.exp(policy.params["log_std"].data)
        base = gain_opt["gains"].data.copy()
        pair, totals = [], []
        for sign in (1.0, -1.0)[: min(2, cfg.episodes - ep)]:
            gains = base + sign * cfg.gain_std * xi
            noise = np.random.default_rng(noise_seed)

            def act(obs, gains=gains, noise=noise):
                return policy.mean_np(obs, gains) + std * noise.standard_normal(skeleton.n_dof)

            _, trans, total = run_episode(env, ref, params, act, spec, record=False)
            if cfg.positive_reward:
                total = float(sum(max(tr.reward, 0.0) for tr in trans))
            curve.episode.append(ep)
            curve.reward.append(total)
            curve.length.append(len(trans))
            curve.failed.append(int(len(trans) < env.n_steps))
            curve.retargeted.append(from_retargeted)
            if progress_cb is not None:
                progress_cb(ep, total)
            if trans:
                pair.append(trans)
            totals.append(total)
            ep += 1
        n_updates += 1
        if len(totals) == 2:
            # raw return difference: Adam's second moment sets the scale, so
            # pairs that barely differ (both failing at once) barely move the gains
            gain_opt["gains"].grad = -0.5 * (totals[0] - totals[1]) * xi
            nn.adam_step(gain_opt, lr=cfg.gain_lr, t=n_updates)
            policy.params["ff.v"].data[:] = gain_opt["gains"].data[0]
            policy.params["ff.a"].data[:] = gain_opt["gains"].data[1]
        if pair:
            _reinforce_update(policy, value, pair, cfg, n_updates)
    return policy, curve


def _reinforce_update(policy: Policy, value: nn.ParamSet, episodes: List[List[Transition]],
                      cfg: TeacherConfig, t: int):
    trans = [tr for ep in episodes for tr in ep]
    obs = np.stack([tr.obs for tr in trans])
    acts = np.stack([tr.action for tr in trans])
    returns = []
    for ep in episodes:
        rewards = np.array([tr.reward for tr in ep])
        if cfg.positive_reward:
            rewards = np.maximum(rewards, 0.0)
        returns.append(discounted_returns(rewards, cfg.gamma))
    returns = np.concatenate(returns)
    scale = max(1.0, float(np.abs(returns).max()))
    target = returns / scale

    value.zero_grad()
    v = _value(value, obs)
    vloss = nn.mse(v, target)
    if not np.isfinite(vloss.data):
        raise FloatingPointError("value loss diverged")
    vloss.backward()
    adv = target - v.data
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    nn.adam_step(value, lr=cfg.value_lr, t=t, grad_clip=cfg.grad_clip)

    p = policy.params
    p.zero_grad()
    mu = policy.mean(obs)
    log_std = p["log_std"]
    z = (Tensor(acts) - mu) * nn.exp(-log_std)
    logp = (nn.square(z) * -0.5).sum(axis=1) - log_std.sum()
    loss = -(logp * Tensor(adv)).mean()
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"policy loss diverged (value loss {float(vloss.data):.4g})")
    loss.backward()
    nn.adam_step(p, lr=cfg.lr, t=t, grad_clip=cfg.grad_clip, lr_scale={"ff.v": 0.0, "ff.a": 0.0})


# ---------------------------------------------------------------------------
# distillation


@dataclass
class DistillConfig:
    history: int = 10
    iterations: int = 6
    rollouts_per_iter: int = 16  # enough dynamics draws per iteration for a history student to generalize
    epochs: int = 100
    lr: float = 3e-3
    hidden: int = 64
    privileged: bool = False
    copy_gains: bool = True
    skip: bool = True
    rollout_noise: float = 0.02
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown distill config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DistillHistory:
    iteration: List[int] = field(default_factory=list)
    dataset_size: List[int] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    epoch_losses: List[List[float]] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["iteration,dataset_size,loss"]
        for i, n, l in zip(self.iteration, self.dataset_size, self.loss):
            lines.append(f"{i},{n},{format_value(l)}")
        return "\n".join(lines) + "\n"


def distill_loss(student: Policy, obs: np.ndarray, targets: np.ndarray) -> Tensor:
    """Mean over samples of the squared action error ||a - a_hat||^2."""
    diff = student.mean(obs) - Tensor(targets)
    return nn.square(diff).sum(axis=1).mean()


def regress(student: Policy, obs: np.ndarray, targets: np.ndarray, epochs: int, lr: float,
            t0: int = 0) -> Tuple[List[float], int]:
    """Full-batch Adam with step rejection: the aggregate loss never increases.

    A step that would raise the loss is undone (parameters and moments) and the
    learning rate halved for the rest of this call. Returns (per-epoch losses, step count).
    """
    p = student.params
    losses = []
    t = t0
    cur = float(distill_loss(student, obs, targets).data)
    losses.append(cur)
    for _ in range(epochs):
        saved = (p.values(), {k: v.copy() for k, v in p.m.items()}, {k: v.copy() for k, v in p.v.items()})
        p.zero_grad()
        loss = distill_loss(student, obs, targets)
        loss.backward()
        nn.adam_step(p, lr=lr, t=t + 1)
        new = float(distill_loss(student, obs, targets).data)
        if new <= cur:
            t += 1
            cur = new
        else:
            p.load_values(saved[0])
            p.m.update(saved[1])
            p.v.update(saved[2])
            lr *= 0.5
        losses.append(cur)
    return losses, t


def dagger_distill(teacher: Policy, skeleton: Skeleton, references: Sequence[MotionSequence],
                   config: Optional[DistillConfig] = None, env_config: Optional[EnvConfig] = None,
                   ) -> Tuple[Policy, DistillHistory]:
    """DAgger: roll out the student, label visited states with the teacher, regress on the aggregate."""
    cfg = config or DistillConfig()
    if teacher.kind != "teacher" or not teacher.spec.privileged:
        raise ValueError("teacher policy must take privileged observations")
    if not references:
        raise ValueError("no references to distill on")
    env = ToyEnv(skeleton, env_config)
    sspec = ObsSpec(skeleton.n_dof, cfg.history, cfg.privileged)
    student = init_policy(sspec, "student", cfg.hidden, cfg.seed, skip=cfg.skip)
    if cfg.copy_gains:
        # the feedforward path has the same shape in both policies; only the network starts fresh
        for name in ("ff.v", "ff.a"):
            student.params[name].data[:] = teacher.params[name].data
    rng = np.random.default_rng([cfg.seed, 0xDA66])
    data_obs: List[np.ndarray] = []
    data_act: List[np.ndarray] = []
    hist = DistillHistory()
    t = 0
    for it in range(cfg.iterations):
        for _ in range(cfg.rollouts_per_iter):
            ref = references[rng.integers(len(references))]
            params = DynamicsParams.sample(skeleton.n_dof, env.config, rng)

            def act(obs):
                # injected noise widens the visited states around the student's own trajectory
                return student.mean_np(obs) + cfg.rollout_noise * rng.standard_normal(skeleton.n_dof)

            _, trans, _ = run_episode(env, ref, params, act, sspec, teacher.spec, record=False)
            for tr in trans:
                data_obs.append(tr.obs)
                data_act.append(teacher.mean_np(tr.teacher_obs))
        obs = np.stack(data_obs)
        targets = np.stack(data_act)
        losses, t = regress(student, obs, targets, cfg.epochs, cfg.lr, t)
        hist.iteration.append(it)
        hist.dataset_size.append(len(data_obs))
        hist.loss.append(losses[-1])
        hist.epoch_losses.append(losses)
    return student, hist


def imitation_gap(student: Policy, teacher: Policy, skeleton: Skeleton, references: Sequence[MotionSequence],
                  env_config: Optional[EnvConfig] = None, seed: int = 0) -> float:
    """||a - a_hat||^2 along student rollouts under randomized dynamics.

    Averaged within each episode first, then across episodes, so a student that
    survives a hard reference longer is not charged for the extra frames.
    """
    env = ToyEnv(skeleton, env_config)
    rng = np.random.default_rng([seed, 0x6A9])
    per_episode = []
    for ref in references:
        params = DynamicsParams.sample(skeleton.n_dof, env.config, rng)
        _, trans, _ = run_episode(env, ref, params, student.mean_np, student.spec, teacher.spec, record=False)
        if trans:
            errs = [float(np.sum((tr.action - teacher.mean_np(tr.teacher_obs)) ** 2)) for tr in trans]
            per_episode.append(math.fsum(errs) / len(errs))
    return math.fsum(per_episode) / len(per_episode) if per_episode else 0.0


# ---------------------------------------------------------------------------
# policy checkpoints


def save_policy(policy: Policy, path) -> None:
    import json

    meta = {"kind": policy.kind, "n_dof": policy.spec.n_dof, "history": policy.spec.history,
            "privileged": policy.spec.privileged, "hidden": policy.hidden}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(nn.dump_params(policy.params.values()))
        fh.write("#POLICY " + json.dumps(meta, sort_keys=True) + "\n")


def load_policy(path) -> Policy:
    import json

    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    values = nn.parse_params(text)
    meta = None
    for ln in text.split("\n"):
        if ln.startswith("#POLICY "):
            meta = json.loads(ln[len("#POLICY "):])
    if meta is None:
        raise ValueError("missing #POLICY section")
    spec = ObsSpec(meta["n_dof"], meta["history"], meta["privileged"])
    p = nn.ParamSet(values)
    return Policy(p, meta["kind"], spec, meta["hidden"])
