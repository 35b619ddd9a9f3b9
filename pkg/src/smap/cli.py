"""Command-line entry point: ``smap <subcommand> [options]``.

Exit status is 0 on success, 1 when a run fails and 2 on a usage error.
Every subcommand writes its outputs under ``--out`` together with
``resolved.cfg``, the configuration it actually used.
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import adapter as A
from . import control as C
from . import evaluation as E
from . import plotting
from . import synth
from .config import ConfigError, RunConfig, load_config, write_resolved
from .motion import format_value, load_motion, save_motion
from .reward import total_reward

MODEL_FILE = "adapter.model"
ADAPTER_CURVE = "adapter_curve.csv"
TEACHER_FILE = "teacher.policy"
STUDENT_FILE = "student.policy"
HELDOUT_DIR = "heldout"


class UsageError(Exception):
    pass


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv(header: Sequence[str], rows) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(format_value(v) if isinstance(v, float) else str(v) for v in r))
    return "\n".join(lines) + "\n"


def _model_path(arg: str) -> str:
    return os.path.join(arg, MODEL_FILE) if os.path.isdir(arg) else arg


def _policy_path(arg: str, default_name: str) -> str:
    return os.path.join(arg, default_name) if os.path.isdir(arg) else arg


def _heldout(data_dir: str):
    path = os.path.join(data_dir, HELDOUT_DIR)
    if os.path.exists(os.path.join(path, "manifest.json")):
        return synth.read_corpus(path)
    return None, None


def reference_pools(model: A.AdapterModel, human: Sequence) -> tuple:
    """(adapted, retargeted) robot references built from the same human sequences."""
    target = model.skeleton("r")
    adapted = [A.adapt(model, h) for h in human]
    retargeted = [C.retarget_linear(h, target) for h in human]
    return adapted, retargeted


def _pools_from_args(args, cfg: RunConfig):
    human, _ = synth.read_corpus(args.data)
    model = A.load_model(_model_path(args.model))
    return model, reference_pools(model, human)


def _eval_pool(pools, which: str):
    adapted, retargeted = pools
    return adapted if which == "adapted" else retargeted


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    manifest = synth.write_corpus(cfg.corpus.spec(), args.out)
    synth.write_corpus(cfg.corpus.heldout_spec(), os.path.join(args.out, HELDOUT_DIR))
    hist = {}
    for e in manifest["files"]:
        key = (e["domain"], e["label"])
        hist[key] = hist.get(key, 0) + 1
    rows = [(d, lab, n) for (d, lab), n in sorted(hist.items())]
    _write(os.path.join(args.out, "corpus.csv"), _csv(["domain", "label", "sequences"], rows))
    print(f"wrote {len(manifest['files'])} sequences to {args.out}")
    return 0


def _adapter_curve_csv(history: A.TrainHistory) -> str:
    return history.to_csv()


def cmd_train_adapter(args, cfg: RunConfig) -> int:
    human, robot = synth.read_corpus(args.data)
    model, history = A.train_adapter(human, robot, cfg.adapter_config())
    A.save_model(model, os.path.join(args.out, MODEL_FILE))
    _write(os.path.join(args.out, ADAPTER_CURVE), _adapter_curve_csv(history))
    if args.plot:
        plotting.chart_file(os.path.join(args.out, "adapter_curve.svg"),
                            {"total": (history.steps, history.total), "recon_h": (history.steps, history.recon_h),
                             "recon_r": (history.steps, history.recon_r)},
                            "Adapter training loss", "step", "loss", log_y=True)
    print(f"final loss {history.total[-1]:.4g}; model saved to {os.path.join(args.out, MODEL_FILE)}")
    return 0


def cmd_adapt(args, cfg: RunConfig) -> int:
    model = A.load_model(_model_path(args.model))
    seq = load_motion(args.input)
    out = A.adapt(model, seq)
    save_motion(out, args.out)
    print(f"adapted {seq.n_frames} frames ({seq.skeleton.name} -> {out.skeleton.name}) into {args.out}")
    return 0


def _adapter_report(model, data_dir: str) -> E.AdapterReport:
    human, robot = synth.read_corpus(data_dir)
    held_h, held_r = _heldout(data_dir)
    return E.adapter_report(model, human, robot, held_h, held_r)


def cmd_eval_adapter(args, cfg: RunConfig) -> int:
    model = A.load_model(_model_path(args.model))
    report = _adapter_report(model, args.data)
    _write(os.path.join(args.out, "adapter_report.csv"), report.to_csv())
    print(f"reconstruction MSE  h {report.mse_h:.4g}  r {report.mse_r:.4g}")
    print(f"code agreement      {report.agreement:.2f}  ({sum(report.per_class().values())} of "
          f"{len(report.per_class())} classes)")
    print(f"active codes        {report.active_codes}  perplexity {report.perplexity:.3g}")
    return 0


def _teacher_pools(pools, which: str):
    adapted, retargeted = pools
    if which == "curriculum":
        return adapted, retargeted
    pool = adapted if which == "adapted" else retargeted
    return pool, pool


def cmd_train_teacher(args, cfg: RunConfig) -> int:
    model, pools = _pools_from_args(args, cfg)
    first, second = _teacher_pools(pools, args.references)
    schedule = cfg.curriculum
    if args.references != "curriculum":
        schedule = C.CurriculumSchedule(0.0, False)
    tcfg = cfg.teacher_config(**({"episodes": args.episodes} if args.episodes is not None else {}))
    teacher, curve = C.train_teacher(model.skeleton("r"), first, second, schedule, tcfg, cfg.env_config())
    C.save_policy(teacher, os.path.join(args.out, TEACHER_FILE))
    _write(os.path.join(args.out, "teacher_curve.csv"), curve.to_csv())
    if args.plot:
        window = max(1, len(curve.reward) // 10)
        plotting.chart_file(os.path.join(args.out, "teacher_curve.svg"),
                            {"episode reward": (curve.episode, curve.reward),
                             f"moving mean ({window})": (curve.episode, plotting.moving_average(curve.reward, window))},
                            "Teacher training", "episode", "total reward")
    n = max(1, len(curve.reward) // 10)
    print(f"episodes {len(curve.reward)}; first-decile mean {np.mean(curve.reward[:n]):.4g}, "
          f"last-decile mean {np.mean(curve.reward[-n:]):.4g}")
    return 0


def _distill(teacher, pools, cfg: RunConfig, history: int, skeleton):
    adapted, _ = pools
    dcfg = cfg.distill_config(history=history)
    student, hist = C.dagger_distill(teacher, skeleton, adapted, dcfg, cfg.env_config())
    gap = C.imitation_gap(student, teacher, skeleton, adapted, cfg.env_config(), seed=cfg.eval.dynamics_seed)
    return student, hist, gap


def cmd_distill(args, cfg: RunConfig) -> int:
    model, pools = _pools_from_args(args, cfg)
    teacher = C.load_policy(_policy_path(args.teacher, TEACHER_FILE))
    history = cfg.distill.history if args.history is None else args.history
    student, hist, gap = _distill(teacher, pools, cfg, history, model.skeleton("r"))
    C.save_policy(student, os.path.join(args.out, STUDENT_FILE))
    _write(os.path.join(args.out, "distill_curve.csv"), hist.to_csv())
    epochs = [(it, e, loss) for it, losses in zip(hist.iteration, hist.epoch_losses) for e, loss in enumerate(losses)]
    _write(os.path.join(args.out, "distill_epochs.csv"), _csv(["iteration", "epoch", "loss"], epochs))
    _write(os.path.join(args.out, "imitation_gap.csv"), _csv(["history", "gap"], [(history, gap)]))
    if args.plot:
        plotting.chart_file(os.path.join(args.out, "distill_curve.svg"),
                            {"aggregate loss": (hist.iteration, hist.loss)},
                            "DAgger distillation", "iteration", "mean squared action error", log_y=True)
    print(f"student H={history}: final aggregate loss {hist.loss[-1] if hist.loss else float('nan'):.4g}, "
          f"on-rollout gap {gap:.4g}")
    return 0


def evaluate_policy(policy, references, cfg: RunConfig, skeleton, rollout_dir: Optional[str] = None):
    env = C.ToyEnv(skeleton, cfg.env_config(randomize=cfg.eval.randomize))
    rng = np.random.default_rng([cfg.eval.dynamics_seed, 0xE7A1])
    logs = []
    for i, ref in enumerate(references):
        params = C.DynamicsParams.sample(skeleton.n_dof, env.config, rng)
        log = C.rollout(policy, env, ref, params)
        logs.append(log)
        if rollout_dir is not None:
            C.save_rollout(log, os.path.join(rollout_dir, f"{i:03d}_{ref.label or 'seq'}.csv"))
    return E.compute_metrics(logs, references), logs


def cmd_eval_policy(args, cfg: RunConfig) -> int:
    model, pools = _pools_from_args(args, cfg)
    policy = C.load_policy(args.policy)
    which = args.references or cfg.eval.references
    refs = _eval_pool(pools, which)
    rdir = os.path.join(args.out, "rollouts")
    os.makedirs(rdir, exist_ok=True)
    report, _ = evaluate_policy(policy, refs, cfg, model.skeleton("r"), rdir)
    _write(os.path.join(args.out, "metrics.csv"), report.to_csv())
    print(report.summary())
    return 0


def cmd_rewards(args, cfg: RunConfig) -> int:
    log = C.load_rollout(args.rollout)
    ref = load_motion(args.reference)
    env = C.ToyEnv(log.skeleton, cfg.env_config())
    env.reset(ref)
    rows, names = [], None
    for t in range(1, log.n_frames):
        snap = log.snapshot(t)
        br = total_reward(snap, env.reference_frame(t), log.skeleton, cfg.reward.direction)
        names = br.names()
        rows.append([t] + [w for w in br.weighted().values()] + [br.total])
    header = ["frame"] + (names or []) + ["total"]
    _write(os.path.join(args.out, "rewards.csv"), _csv(header, rows))
    if rows:
        means = np.mean(np.array([r[1:] for r in rows]), axis=0)
        width = max(len(h) for h in header)
        for h, m in zip(header[1:], means):
            print(f"{h.ljust(width)}  {m: .6g}")
    return 0


def codebook_sweep(human, robot, held_h, held_r, cfg: RunConfig, sizes: Sequence[int]):
    rows = []
    for n in sizes:
        model, _ = A.train_adapter(human, robot, cfg.adapter_config(codebook_size=int(n)))
        rep = E.adapter_report(model, human, robot, held_h, held_r)
        recon = 0.5 * (rep.mse_h + rep.mse_r)
        rows.append({"n": int(n), "mse_h": rep.mse_h, "mse_r": rep.mse_r, "agreement": rep.agreement,
                     "active": rep.active_codes, "perplexity": rep.perplexity,
                     "score": combined_score(recon, rep.agreement)})
    return rows


def combined_score(recon_mse: float, agreement: float) -> float:
    """Lower is better: mean reconstruction MSE plus the fraction of misaligned classes."""
    return recon_mse + (1.0 - agreement)


def cmd_ablate_codebook(args, cfg: RunConfig) -> int:
    human, robot = synth.read_corpus(args.data)
    held_h, held_r = _heldout(args.data)
    rows = codebook_sweep(human, robot, held_h, held_r, cfg, args.sizes)
    keys = ["n", "mse_h", "mse_r", "agreement", "active", "perplexity", "score"]
    _write(os.path.join(args.out, "ablate_codebook.csv"), _csv(keys, [[r[k] for k in keys] for r in rows]))
    if args.plot:
        ns = [r["n"] for r in rows]
        plotting.chart_file(os.path.join(args.out, "ablate_codebook.svg"),
                            {"combined score": (ns, [r["score"] for r in rows]),
                             "1 - agreement": (ns, [1 - r["agreement"] for r in rows])},
                            "Codebook size sweep", "codebook entries", "lower is better")
    for r in rows:
        print(f"n={r['n']:3d}  mse h {r['mse_h']:.4g} r {r['mse_r']:.4g}  agreement {r['agreement']:.2f}  "
              f"score {r['score']:.4g}")
    return 0


def cmd_ablate_history(args, cfg: RunConfig) -> int:
    model, pools = _pools_from_args(args, cfg)
    teacher = C.load_policy(_policy_path(args.teacher, TEACHER_FILE))
    skeleton = model.skeleton("r")
    rows = []
    for h in args.histories:
        student, hist, gap = _distill(teacher, pools, cfg, int(h), skeleton)
        report, _ = evaluate_policy(student, _eval_pool(pools, cfg.eval.references), cfg, skeleton)
        rows.append([int(h), hist.loss[-1] if hist.loss else float("nan"), gap, report.e_vel, report.e_mpkpe,
                     report.e_mpjpe, report.fail])
        print(f"H={h:2d}  gap {gap:.4g}  E_vel {report.e_vel:.4g}  E_mpjpe {report.e_mpjpe:.4g}  fail {report.fail}")
    header = ["history", "aggregate_loss", "gap", "E_vel", "E_mpkpe", "E_mpjpe", "fail"]
    _write(os.path.join(args.out, "ablate_history.csv"), _csv(header, rows))
    if args.plot:
        hs = [r[0] for r in rows]
        plotting.chart_file(os.path.join(args.out, "ablate_history.svg"), {"on-rollout gap": (hs, [r[2] for r in rows])},
                            "History length sweep", "history steps", "mean squared action error")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="smap", description="Motion adapter and tracking-policy pipeline.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="INI run configuration (defaults used when omitted)")
        p.set_defaults(func=func)
        return p

    def out(p, required=True):
        p.add_argument("--out", required=required, help="output directory")

    def plot(p):
        p.add_argument("--plot", action="store_true", help="also write SVG line plots")

    p = add("gen-data", cmd_gen_data, "Generate the paired synthetic corpus and a noise-free held-out copy.")
    out(p)
    p = add("train-adapter", cmd_train_adapter, "Train the motion adapter on a corpus.")
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    out(p)
    plot(p)
    p = add("adapt", cmd_adapt, "Map a human-skeleton motion file onto the robot skeleton.")
    p.add_argument("--model", required=True, help="adapter directory or model file")
    p.add_argument("--in", dest="input", required=True, help="input SMAP-MOTION file (human skeleton)")
    p.add_argument("--out", required=True, help="output SMAP-MOTION file (robot skeleton)")
    p = add("eval-adapter", cmd_eval_adapter, "Report reconstruction error, code alignment and codebook usage.")
    p.add_argument("--model", required=True, help="adapter directory or model file")
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    out(p)
    p = add("train-teacher", cmd_train_teacher, "Train the privileged teacher policy.")
    p.add_argument("--model", required=True, help="adapter directory or model file")
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--references", choices=("curriculum", "adapted", "retargeted"), default="curriculum",
                   help="reference pool: curriculum mixing, or one pool only")
    p.add_argument("--episodes", type=int, default=None, help="override [control] teacher_episodes")
    out(p)
    plot(p)
    p = add("distill", cmd_distill, "Distill a teacher into a history-conditioned student with DAgger.")
    p.add_argument("--teacher", required=True, help="teacher directory or policy file")
    p.add_argument("--model", required=True, help="adapter directory or model file")
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--history", type=int, default=None, help="override [control] distill_history")
    out(p)
    plot(p)
    p = add("eval-policy", cmd_eval_policy, "Roll out a policy and compute tracking metrics.")
    p.add_argument("--policy", required=True, help="policy file")
    p.add_argument("--model", required=True, help="adapter directory or model file")
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--references", choices=("adapted", "retargeted"), default=None,
                   help="override [eval] references")
    out(p)
    p = add("rewards", cmd_rewards, "Per-frame reward breakdown of a rollout log against its reference.")
    p.add_argument("--rollout", required=True, help="SMAP-ROLLOUT file")
    p.add_argument("--reference", required=True, help="SMAP-MOTION reference the rollout tracked")
    out(p)
    p = add("ablate-codebook", cmd_ablate_codebook, "Sweep the codebook size.")
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--sizes", type=_int_list, default="16,32,64", help="comma-separated codebook sizes")
    out(p)
    plot(p)
    p = add("ablate-history", cmd_ablate_history, "Sweep the student history length.")
    p.add_argument("--teacher", required=True, help="teacher directory or policy file")
    p.add_argument("--model", required=True, help="adapter directory or model file")
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--histories", type=_int_list, default="0,5,10,32", help="comma-separated history lengths")
    out(p)
    plot(p)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"smap: configuration error: {exc}", file=sys.stderr)
        return 2
    out_dir = args.out if args.command != "adapt" else os.path.dirname(os.path.abspath(args.out))
    try:
        write_resolved(cfg, out_dir)
        return args.func(args, cfg)
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # any failure of the run itself
        print(f"smap {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
