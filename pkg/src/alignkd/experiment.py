"""Desk-scale distillation experiment.

A wide teacher is pretrained on a large synthetic set; students of half
the width are trained on a small set with the supervised loss only or
with every distillation term, and compared on held-out cross-entropy.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import SynthSpec, synth_samples
from .losses import LossConfig
from .train import TeacherCache, Trainer, TrainConfig, evaluate, run_training
from .vlm import ToyVLM, VlmConfig, load_model, save_model

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    teacher: VlmConfig = field(default_factory=lambda: VlmConfig(d_model=128, n_heads=8, n_layers=8, seed=100))
    student: VlmConfig = field(default_factory=lambda: VlmConfig(d_model=64, n_heads=4, n_layers=4))
    teacher_samples: int = 4000
    student_samples: int = 256
    heldout_samples: int = 300
    teacher_steps: int = 2000
    student_steps: int = 1500
    batch_size: int = 8
    teacher_lr: float = 1e-3
    student_lr: float = 1e-3
    projector_lr: float = 1e-3
    k: int = 4
    lam: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data_seed: int = 1


@dataclass
class SeedResult:
    seed: int
    ce_supervised: float
    ce_distilled: float

    @property
    def distilled_wins(self) -> bool:
        return self.ce_distilled < self.ce_supervised


@dataclass
class ExperimentResult:
    teacher_ce: float
    seeds: list[SeedResult]
    seconds: float

    @property
    def wins(self) -> int:
        return sum(r.distilled_wins for r in self.seeds)


def datasets(cfg: ExperimentConfig):
    base = cfg.data_seed * 1000
    return (
        synth_samples(SynthSpec(cfg.teacher_samples, seed=base + 1)),
        synth_samples(SynthSpec(cfg.student_samples, seed=base + 2)),
        synth_samples(SynthSpec(cfg.heldout_samples, seed=base + 3)),
    )


def pretrain_teacher(cfg: ExperimentConfig, samples, path: str | Path | None = None) -> ToyVLM:
    if path is not None and Path(path).exists():
        teacher, _, _ = load_model(path, "f32")
        if teacher.cfg == cfg.teacher:
            log.info("reusing teacher %s", path)
            return teacher
    tcfg = TrainConfig(
        steps=cfg.teacher_steps,
        batch_size=cfg.batch_size,
        lr_projector_max=cfg.teacher_lr,
        lr_other_max=cfg.teacher_lr,
        seed=cfg.teacher.seed,
        losses=LossConfig.supervised_only(),
    )
    teacher = ToyVLM(cfg.teacher)
    run_training(Trainer(teacher, tcfg), samples, log_every=250)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_model(path, teacher, {"kind": "teacher"})
    return teacher


def train_student(cfg: ExperimentConfig, samples, seed: int, teacher: ToyVLM | None) -> ToyVLM:
    losses = LossConfig(k=cfg.k, lam=cfg.lam) if teacher is not None else LossConfig.supervised_only()
    tcfg = TrainConfig(
        steps=cfg.student_steps,
        batch_size=cfg.batch_size,
        lr_projector_max=cfg.projector_lr,
        lr_other_max=cfg.student_lr,
        seed=seed,
        losses=losses,
    )
    student = ToyVLM(replace(cfg.student, seed=seed))
    cache = TeacherCache() if teacher is not None else None
    run_training(Trainer(student, tcfg, teacher=teacher, cache=cache), samples)
    return student


def run_experiment(cfg: ExperimentConfig, teacher_path: str | Path | None = None) -> ExperimentResult:
    start = time.perf_counter()
    big, small, heldout = datasets(cfg)
    teacher = pretrain_teacher(cfg, big, teacher_path)
    teacher_ce = evaluate(teacher, heldout, greedy=False)["cross_entropy"]
    log.info("teacher held-out CE %.4f", teacher_ce)
    results = []
    for seed in cfg.seeds:
        sup = evaluate(train_student(cfg, small, seed, None), heldout, greedy=False)["cross_entropy"]
        kd = evaluate(train_student(cfg, small, seed, teacher), heldout, greedy=False)["cross_entropy"]
        results.append(SeedResult(seed, sup, kd))
        log.info("seed %d supervised %.4f distilled %.4f", seed, sup, kd)
    return ExperimentResult(teacher_ce, results, time.perf_counter() - start)
