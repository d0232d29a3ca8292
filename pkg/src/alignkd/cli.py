"""Command-line entry point: ``akd <command> [options]``.

Exit codes: 0 success, 1 a gradient check failed, 2 configuration or
missing-input error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradsuite
from .config import RunConfig, load_config
from .data import SynthSpec, read_dataset, self_check, synth_generate
from .errors import AlignKDError, CheckpointError, ConfigError
from .losses import LossConfig
from .probe import probe_aggregate, write_report
from .train import TeacherCache, Trainer, evaluate, run_training
from .vlm import ToyVLM, load_model

log = logging.getLogger("alignkd")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _existing(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _dataset(path: str | None, cfg: RunConfig, what: str = "dataset"):
    return read_dataset(_existing(path, what), vocab_size=cfg.student.vocab_size)


# -- commands --------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    n = args.n if args.n is not None else cfg.data.n_samples
    if n < 1:
        raise ConfigError(f"--n must be >= 1, got {n}")
    spec = SynthSpec(
        n_samples=n,
        seed=args.seed if args.seed is not None else cfg.data.seed,
        max_prompt_tokens=args.max_prompt_tokens if args.max_prompt_tokens is not None else cfg.data.max_prompt_tokens,
        caption=cfg.data.caption,
        attribute=cfg.data.attribute,
        position=cfg.data.position,
    )
    out = Path(args.out or cfg.data.train_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    synth_generate(spec, out)
    samples = read_dataset(out)
    bad = self_check(samples)
    if bad:
        raise RuntimeError(f"{bad} generated samples fail the self-check")
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    tcfg = cfg.train
    if args.stage:
        tcfg.stage = args.stage
    out_dir = Path(args.out or cfg.output_dir)
    header = {"root_seed": str(cfg.seed)}
    samples = _dataset(cfg.data.train_path, cfg, "training dataset")

    if args.model == "teacher":
        tcfg.losses = LossConfig.supervised_only()
        model = ToyVLM(cfg.teacher)
        trainer = Trainer(model, tcfg, kind="teacher", extra_header=header)
    else:
        teacher = None
        if tcfg.losses.any_kd:
            if not args.teacher:
                raise ConfigError("distillation terms are enabled but no --teacher checkpoint was given")
            teacher, _, _ = load_model(_existing(args.teacher, "teacher checkpoint"), tcfg.precision)
            if teacher.cfg != cfg.teacher:
                log.warning("teacher checkpoint config differs from [model.teacher]; using the checkpoint's")
            _require_compatible(cfg, teacher)
        model = ToyVLM(cfg.student)
        if args.init:
            init, _, _ = load_model(_existing(args.init, "--init checkpoint"), tcfg.precision)
            if init.cfg != cfg.student:
                raise ConfigError("--init checkpoint does not match [model.student]")
            model = init
        cache = None
        if teacher is not None and args.cache_teacher:
            cache = TeacherCache(out_dir / "teacher_cache" / teacher.checksum())
        trainer = Trainer(model, tcfg, teacher=teacher, cache=cache, extra_header=header)

    if args.resume:
        trainer.restore(_existing(args.resume, "--resume checkpoint"))
    out_dir.mkdir(parents=True, exist_ok=True)
    run_training(trainer, samples, out_dir, log_every=args.log_every)
    print(f"step={trainer.step}")
    print(f"checkpoint={out_dir / 'final.akd'}")
    return EXIT_OK


def _require_compatible(cfg: RunConfig, teacher: ToyVLM) -> None:
    shared = ("vocab_size", "patch_rows", "patch_cols", "d_patch", "n_vision_tokens", "max_text_tokens", "frozen_seed")
    diff = [k for k in shared if getattr(cfg.student, k) != getattr(teacher.cfg, k)]
    if diff:
        raise ConfigError(f"teacher checkpoint and student disagree on {', '.join(diff)}")


def cmd_probe(args, cfg: RunConfig) -> int:
    model, header, _ = load_model(_existing(args.checkpoint, "checkpoint"), "f64")
    samples = read_dataset(_existing(args.data or cfg.data.eval_path or cfg.data.train_path, "dataset"), model.cfg.vocab_size)
    max_samples = args.max_samples if args.max_samples is not None else cfg.probe.max_samples
    report = probe_aggregate(model, samples, max_samples)
    out = Path(args.out or Path(cfg.output_dir) / "probe.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    seed = header.get("root_seed", header.get("seed"))
    write_report(out, report, model.checksum(), int(seed) if seed is not None else None)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = gradsuite.run_suite(step=args.step, tolerance=args.tolerance, seed=args.seed)
    gradsuite.format_table(results)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_eval(args, cfg: RunConfig) -> int:
    model, _, _ = load_model(_existing(args.checkpoint, "checkpoint"), "f64")
    samples = read_dataset(_existing(args.data or cfg.data.eval_path or cfg.data.train_path, "dataset"), model.cfg.vocab_size)
    metrics = evaluate(model, samples, greedy=not args.no_generate)
    metrics["n_samples"] = len(samples)
    for key, value in metrics.items():
        print(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="akd", description="Toy vision-language distillation tools.")
    parser.add_argument("--config", help="run configuration file (schema=1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--max-prompt-tokens", type=int)
    p.add_argument("--out", help="output .jsonl path (default: data.train_path)")

    p = add("train", cmd_train, "train a student (or pretrain the teacher)")
    p.add_argument("--stage", choices=("pretrain", "finetune"))
    p.add_argument("--model", choices=("student", "teacher"), default="student")
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--init", help="initialise the student from this checkpoint's weights")
    p.add_argument("--resume", help="resume from a training checkpoint")
    p.add_argument("--cache-teacher", action="store_true", help="cache teacher outputs on disk")
    p.add_argument("--out", help="output directory (default: run.output_dir)")
    p.add_argument("--log-every", type=int, default=0)

    p = add("probe", cmd_probe, "layer-role probes on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--max-samples", type=int)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss term")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)

    p = add("eval", cmd_eval, "held-out cross-entropy and exact match")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--no-generate", action="store_true", help="skip greedy decoding")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.sub_config or args.config)
        return args.func(args, cfg)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AlignKDError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
