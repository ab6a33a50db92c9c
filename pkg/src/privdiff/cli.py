"""Command-line surface: train-teacher, train-student, sample, account, eval.

Exit codes are part of the contract: 0 success, 2 usage or configuration
error, 3 training failure, 4 privacy budget infeasible or exceeded. Output
files land under output_dir, resolved against $PRIVDIFF_OUTPUT_ROOT when that
is set. Every command is reproducible byte-for-byte from (config, seeds) and
never mutates its inputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .checkpoint import (MetricsLog, load_student_state, load_teacher,
                         save_student_state, save_teacher, write_manifest)
from .config import ConfigError, RunConfig, parse_config
from .data import LabeledDataset, file_sha256, read_dataset, write_dataset
from .diffusion import Denoiser, GuidanceConfig, build_schedule, sample_reverse
from .metrics import make_metric_report
from .nn import MLPArch, OptState
from .privacy import (PrivacyInfeasibleError, PrivacyParams, calibrate_sigma,
                      total_epsilon)
from .training import (BudgetExceededError, TrainingFailureError, TrainPlan,
                       UNSET_SIGMA, pseudo_label, sample_labeled, train_student,
                       train_teacher)

__all__ = ["main"]


def _outdir(cfg: RunConfig) -> Path:
    root = os.environ.get("PRIVDIFF_OUTPUT_ROOT", ".")
    out = Path(root) / cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_labeled(cfg: RunConfig) -> LabeledDataset:
    x, labels, meta = read_dataset(cfg.dataset)
    if labels is not None:
        k = int(meta.get("k", 0)) or int(labels.max()) + 1
        return LabeledDataset(x, labels, k)
    if cfg.clusters >= 1:
        return pseudo_label(x, cfg.clusters, cfg.seed)
    raise ConfigError("dataset has no labels; set clusters >= 1 for pseudo-labelling")


def _config_manifest_fields(cfg: RunConfig, command: str) -> dict:
    fields = {"command": command, "version": __version__}
    for k, v in vars(cfg).items():
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        fields[k] = v
    if cfg.dataset and Path(cfg.dataset).exists():
        fields["dataset_sha256"] = file_sha256(cfg.dataset)
    return fields


def _teacher_plan(cfg: RunConfig) -> TrainPlan:
    return TrainPlan(iterations=cfg.teacher_iterations, batch_size=cfg.teacher_batch_size,
                     lr=cfg.teacher_lr, guidance_w=cfg.guidance_w,
                     p_uncond=cfg.label_dropout, seed=cfg.seed,
                     val_fraction=cfg.val_fraction)


def _student_plan(cfg: RunConfig) -> TrainPlan:
    privacy = PrivacyParams(C=cfg.clip_bound,
                            sigma=cfg.sigma if cfg.sigma is not None else UNSET_SIGMA,
                            B=cfg.batch_size, N=cfg.iterations,
                            T=cfg.time_steps, s=1, delta=cfg.delta)
    return TrainPlan(iterations=cfg.iterations, batch_size=cfg.batch_size,
                     lambda_adv=cfg.lambda_adv, lr=cfg.lr, lr_disc=cfg.lr_disc,
                     guidance_w=cfg.guidance_w, p_uncond=cfg.label_dropout,
                     use_data_mse=cfg.use_data_mse, privacy=privacy,
                     target_epsilon=cfg.target_epsilon, seed=cfg.seed,
                     val_fraction=cfg.val_fraction,
                     checkpoint_every=cfg.checkpoint_every)


def _spend_report_lines(privacy: PrivacyParams, spend) -> list[str]:
    return [f"C={privacy.C:.17g}",
            f"sigma={privacy.sigma:.17g}",
            f"B={privacy.B}",
            f"N={privacy.N}",
            f"T={privacy.T}",
            f"s={privacy.s}",
            f"delta={privacy.delta:.17g}",
            f"best_order={spend.best_order:.17g}",
            f"eps_rdp={spend.epsilon_rdp:.17g}",
            f"eps_dp_raw={spend.epsilon_dp:.17g}",
            f"eps_dp={spend.reported_epsilon:.17g}"]


def cmd_train_teacher(args) -> int:
    cfg = parse_config(args.config, args.set)
    cfg.validate(need_dataset=True)
    data = _load_labeled(cfg)
    schedule = build_schedule(cfg.time_steps, cfg.beta_start, cfg.beta_end)
    out = _outdir(cfg)
    log_path = out / "teacher_metrics.tsv"
    log_path.unlink(missing_ok=True)
    log = MetricsLog(log_path, ["iteration", "loss", "lr", "holdout_loss"])
    eval_every = max(1, cfg.teacher_iterations // 10)
    model, _ = train_teacher(data, schedule, _teacher_plan(cfg),
                             hidden=cfg.teacher_hidden, time_dim=cfg.time_embed_dim,
                             eval_every=eval_every, log_cb=log.append)
    ckpt = out / "teacher.ckpt"
    final_opt = OptState(cfg.teacher_lr, cfg.teacher_iterations, cfg.teacher_iterations)
    save_teacher(ckpt, model, schedule, opt=final_opt,
                 extra={"dataset_sha256": file_sha256(cfg.dataset), "seed": cfg.seed})
    write_manifest(out / "teacher_manifest.txt",
                   _config_manifest_fields(cfg, "train-teacher"))
    print(f"teacher checkpoint: {ckpt}")
    return 0


def cmd_train_student(args) -> int:
    cfg = parse_config(args.config, args.set)
    cfg.validate(need_dataset=True, need_privacy=True)
    teacher, tdoc = load_teacher(args.teacher)
    schedule = build_schedule(cfg.time_steps, cfg.beta_start, cfg.beta_end)
    if tdoc["schedule"]["hash"] != schedule.content_hash():
        raise ConfigError("teacher was trained on a different noise schedule")
    data = _load_labeled(cfg)
    plan = _student_plan(cfg)
    out = _outdir(cfg)
    log_path = out / "student_metrics.tsv"
    state = None
    if args.resume:
        state, _ = load_student_state(args.resume)
    else:
        log_path.unlink(missing_ok=True)
    log = MetricsLog(log_path, ["iteration", "dis_loss", "adv_loss", "disc_loss",
                                "lr", "eps_spent"])
    ckpt_last = out / "student_last.ckpt"
    state, spend, _ = train_student(
        teacher, data, schedule, plan, state=state, log_cb=log.append,
        checkpoint_cb=lambda st, hist: save_student_state(ckpt_last, st, schedule),
        stop_iteration=args.stop_after,
        student_hidden=cfg.student_hidden, disc_hidden=cfg.disc_hidden,
        student_conditioned=cfg.student_conditioned,
        disc_conditioned=cfg.disc_conditioned, time_dim=cfg.time_embed_dim)
    ckpt = out / "student.ckpt"
    save_student_state(ckpt, state, schedule,
                       extra={"dataset_sha256": file_sha256(cfg.dataset)})
    report = _spend_report_lines(state.privacy, spend)
    (out / "privacy_report.txt").write_text("\n".join(report) + "\n")
    write_manifest(out / "student_manifest.txt",
                   _config_manifest_fields(cfg, "train-student"))
    print("\n".join(report))
    print(f"student checkpoint: {ckpt}")
    return 0


def _load_model_for_sampling(path) -> tuple[Denoiser, dict]:
    """Accept either a teacher or a student checkpoint."""
    try:
        return load_teacher(path)
    except ValueError:
        state, doc = load_student_state(path)
        return state.models.student, doc


def cmd_sample(args) -> int:
    model, doc = _load_model_for_sampling(args.checkpoint)
    meta = doc["schedule"]
    schedule = build_schedule(int(meta["T"]), float(meta["beta_first"]),
                              float(meta["beta_last"]))
    rng = np.random.default_rng(args.seed)
    w = args.guidance_w
    header = {"schedule_hash": schedule.content_hash(), "seed": args.seed,
              "guidance_w": "%.17g" % w, "source_kind": doc["kind"]}
    if args.n == 0:
        write_dataset(args.output, np.zeros((0, model.data_dim)), None, 0, header=header)
        print(f"samples: {args.output}")
        return 0
    if args.per_class:
        if model.n_classes < 1:
            raise ConfigError("--per-class needs a class-conditional model")
        ds = sample_labeled(model, schedule, args.n, rng, w=w)
        write_dataset(args.output, ds.x, ds.y, ds.n_classes, header=header)
    else:
        label = args.label
        samples = sample_reverse(model, schedule, GuidanceConfig(w), args.n, label, rng)
        write_dataset(args.output, samples, None, 0, header=header)
    print(f"samples: {args.output}")
    return 0


def _student_param_count(cfg: RunConfig, data_dim: int, n_classes: int) -> int:
    cond = n_classes if cfg.student_conditioned else 0
    arch = MLPArch(data_dim + cfg.time_embed_dim + cond, cfg.student_hidden, data_dim)
    return sum(fi * fo + fo for fi, fo in arch.layer_dims())


def cmd_account(args) -> int:
    cfg = parse_config(args.config, args.set)
    cfg.validate(need_privacy=True)
    if args.param_count is not None:
        s = args.param_count
    else:
        if not cfg.dataset or not Path(cfg.dataset).exists():
            raise ConfigError("account needs --param-count or a dataset header to size the model")
        x, labels, meta = read_dataset(cfg.dataset)
        k = int(meta.get("k", 0)) or cfg.clusters
        s = _student_param_count(cfg, int(meta["d"]), k)
    base = PrivacyParams(C=cfg.clip_bound, sigma=cfg.sigma if cfg.sigma is not None else 1.0,
                         B=cfg.batch_size, N=cfg.iterations, T=cfg.time_steps,
                         s=s, delta=cfg.delta)
    if cfg.target_epsilon is not None:
        base = base.with_sigma(calibrate_sigma(cfg.target_epsilon, base))
    spend = total_epsilon(base)
    lines = _spend_report_lines(base, spend)
    print("\n".join(lines))
    if args.output:
        Path(args.output).write_text("\n".join(lines) + "\n")
    return 0


def cmd_eval(args) -> int:
    x_s, y_s, meta_s = read_dataset(args.samples)
    x_r, y_r, meta_r = read_dataset(args.real)
    if x_s.shape[1] != x_r.shape[1]:
        raise ConfigError(f"dimension mismatch: samples d={x_s.shape[1]}, real d={x_r.shape[1]}")
    synth_l = real_l = None
    if y_s is not None and y_r is not None:
        k = max(int(meta_s.get("k", 0)), int(meta_r.get("k", 0)),
                int(y_s.max()) + 1 if y_s.size else 1, int(y_r.max()) + 1 if y_r.size else 1)
        synth_l = LabeledDataset(x_s, y_s, k)
        real_l = LabeledDataset(x_r, y_r, k)
    report = make_metric_report(x_r, x_s, synth_l, real_l, seed=args.seed)
    lines = report.to_lines()
    print("\n".join(lines))
    Path(args.output).write_text("\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="privdiff",
                                description="Differentially private diffusion "
                                            "distillation at desk scale.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-teacher", help="fit the guidance teacher on private data")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("train-student", help="distil a private student from a teacher")
    s.add_argument("--config", required=True)
    s.add_argument("--teacher", required=True, help="teacher checkpoint path")
    s.add_argument("--resume", default=None, help="student checkpoint to continue")
    s.add_argument("--stop-after", type=int, default=None,
                   help="pause after this iteration (resume later)")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_train_student)

    g = sub.add_parser("sample", help="draw samples from a checkpointed model")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--n", type=int, required=True, help="samples (per class with --per-class)")
    g.add_argument("--label", type=int, default=None)
    g.add_argument("--per-class", action="store_true")
    g.add_argument("--guidance-w", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--output", required=True)
    g.set_defaults(func=cmd_sample)

    a = sub.add_parser("account", help="privacy budget for a configuration")
    a.add_argument("--config", required=True)
    a.add_argument("--param-count", type=int, default=None,
                   help="override the student parameter count s")
    a.add_argument("--output", default=None)
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    a.set_defaults(func=cmd_account)

    e = sub.add_parser("eval", help="score a samples file against real data")
    e.add_argument("--samples", required=True)
    e.add_argument("--real", required=True)
    e.add_argument("--output", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PrivacyInfeasibleError, BudgetExceededError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except TrainingFailureError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
