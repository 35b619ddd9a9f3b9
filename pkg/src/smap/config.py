"""Run configuration: an INI document with [corpus], [adapter], [reward], [control] and [eval].

Every key has a default, unknown sections or keys are errors, and a run writes
the fully resolved document next to its outputs. The global seed lives in
``[corpus] seed`` and can be overridden with the ``SMAP_SEED`` environment
variable; every component derives its own stream from it.

``[control]`` holds three groups: environment keys are unprefixed, teacher
keys start with ``teacher_`` and distillation keys with ``distill_``; the
curriculum is ``curriculum`` (on/off) and ``w_max``.
"""
from __future__ import annotations

import configparser
import io
import os
import typing
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Optional

from .adapter import AdapterConfig
from .control import CurriculumSchedule, DistillConfig, EnvConfig, TeacherConfig
from .reward import DIRECTION_VARIANTS
from .synth import CorpusSpec, default_corpus_spec

SECTIONS = ("corpus", "adapter", "reward", "control", "eval")
SEED_ENV = "SMAP_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    seed: int = 0
    sequences_per_class: int = 8
    frames: int = 240
    dt: float = 1.0 / 30.0
    noise_std: float = 0.02
    heldout_seed_offset: int = 1000

    def spec(self) -> CorpusSpec:
        return default_corpus_spec(self.seed, self.sequences_per_class, self.frames, self.dt, self.noise_std)

    def heldout_spec(self) -> CorpusSpec:
        """Noise-free corpus from a different seed, for reconstruction checks."""
        return default_corpus_spec(self.seed + self.heldout_seed_offset, self.sequences_per_class,
                                   self.frames, self.dt, 0.0)


@dataclass
class RewardConfig:
    direction: str = "as_printed"


@dataclass
class EvalConfig:
    references: str = "adapted"
    dynamics_seed: int = 0
    randomize: bool = True


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.corpus.seed

    def adapter_config(self, **overrides) -> AdapterConfig:
        return _replace(self.adapter, seed=self.seed, **overrides)

    def teacher_config(self, **overrides) -> TeacherConfig:
        return _replace(self.teacher, seed=self.seed, **overrides)

    def distill_config(self, **overrides) -> DistillConfig:
        return _replace(self.distill, seed=self.seed, **overrides)

    def env_config(self, **overrides) -> EnvConfig:
        return _replace(self.env, direction=self.reward.direction, **overrides)


def _replace(obj, **kw):
    from dataclasses import replace

    return replace(obj, **kw)


# keys that are set from elsewhere and therefore not exposed
_HIDDEN = {"adapter": {"seed"}, "teacher": {"seed"}, "distill": {"seed"}, "env": {"direction"}}


def _layout(cfg: RunConfig):
    """(section, key, owner object, attribute) for every exposed key, in output order."""
    out = []
    for f in fields(cfg.corpus):
        out.append(("corpus", f.name, cfg.corpus, f.name))
    for f in fields(cfg.adapter):
        if f.name not in _HIDDEN["adapter"]:
            out.append(("adapter", f.name, cfg.adapter, f.name))
    out.append(("reward", "direction", cfg.reward, "direction"))
    for f in fields(cfg.env):
        if f.name not in _HIDDEN["env"]:
            out.append(("control", f.name, cfg.env, f.name))
    out.append(("control", "curriculum", cfg.curriculum, "enabled"))
    out.append(("control", "w_max", cfg.curriculum, "w_max"))
    for f in fields(cfg.teacher):
        if f.name not in _HIDDEN["teacher"]:
            out.append(("control", "teacher_" + f.name, cfg.teacher, f.name))
    for f in fields(cfg.distill):
        if f.name not in _HIDDEN["distill"]:
            out.append(("control", "distill_" + f.name, cfg.distill, f.name))
    for f in fields(cfg.eval):
        out.append(("eval", f.name, cfg.eval, f.name))
    return out


def _field_type(owner, attr):
    hints = typing.get_type_hints(type(owner))
    return hints[attr]


def _parse_value(text: str, typ, where: str):
    text = text.strip()
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if origin is typing.Union:  # Optional[int]
            if text.lower() in ("", "none"):
                return None
            inner = [a for a in typing.get_args(typ) if a is not type(None)][0]
            return _parse_value(text, inner, where)
        if origin is tuple:
            parts = [p for p in text.replace(" ", "").split(",") if p]
            return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported type {typ}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _validate(cfg: RunConfig) -> None:
    if cfg.reward.direction not in DIRECTION_VARIANTS:
        raise ConfigError(f"reward.direction must be one of {DIRECTION_VARIANTS}")
    if cfg.eval.references not in ("adapted", "retargeted"):
        raise ConfigError("eval.references must be 'adapted' or 'retargeted'")
    if not 0.0 <= cfg.curriculum.w_max <= 1.0:
        raise ConfigError("control.w_max must lie in [0, 1]")
    for name in ("mass_range", "friction_range", "motor_range"):
        r = getattr(cfg.env, name)
        if len(r) != 2 or r[0] > r[1]:
            raise ConfigError(f"control.{name} must be 'low, high'")


def parse_config(text: str, env: Optional[Dict[str, str]] = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    table = {(sec, key): (owner, attr) for sec, key, owner, attr in _layout(cfg)}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]; expected one of {', '.join(SECTIONS)}")
        for key, raw in parser.items(sec):
            if (sec, key) not in table:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            owner, attr = table[(sec, key)]
            setattr(owner, attr, _parse_value(raw, _field_type(owner, attr), f"[{sec}] {key}"))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.corpus.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    _validate(cfg)
    return cfg


def load_config(path: Optional[str], env: Optional[Dict[str, str]] = None) -> RunConfig:
    if path is None:
        return parse_config("", env)
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), env)


def dump_config(cfg: RunConfig) -> str:
    """Resolved document; parsing it back yields an equal configuration."""
    buf = io.StringIO()
    current = None
    for sec, key, owner, attr in _layout(cfg):
        if sec != current:
            if current is not None:
                buf.write("\n")
            buf.write(f"[{sec}]\n")
            current = sec
        buf.write(f"{key} = {_format_value(getattr(owner, attr))}\n")
    return buf.getvalue()


def write_resolved(cfg: RunConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved.cfg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    return path


def as_dict(cfg: RunConfig) -> Dict[str, Dict[str, Any]]:
    out: Dict[str, Dict[str, Any]] = {}
    for sec, key, owner, attr in _layout(cfg):
        out.setdefault(sec, {})[key] = getattr(owner, attr)
    return out
