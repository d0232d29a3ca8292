"""Teacher/student distillation training.

One optimizer step consumes ``accumulation_steps`` micro-batches.  Each
micro-batch loss is divided by the accumulation count before backward, so
with the per-sample-mean losses the accumulated gradient equals that of
one batch of ``batch_size * accumulation_steps`` samples.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import BatchLoader, DistillBatch, Sample
from .errors import BadSchedule, CheckpointError, EmptyDataset, NonFiniteComponent, NonFiniteLoss
from .losses import LossConfig, LossReport, Projectors, TeacherOutputs, align_kd_objective
from .tensor import Tensor
from .vlm import EOS_ID, ToyVLM, VlmConfig, generate_greedy

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "lr", "l_sup", "l_attn_tv", "l_v_focus", "l_v_all", "l_v", "l_rkld", "total")
PROJECTOR_PREFIXES = ("vision.", "p_attn.", "p_v.", "p_attn_last.")


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    accumulation_steps: int = 1
    lr_projector_max: float = 1e-3
    lr_other_max: float = 2e-5
    lr_finetune_max: float = 4e-5
    warmup_frac: float = 0.03
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "f32"
    stage: str = "pretrain"
    checkpoint_every: int = 0
    losses: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 <= self.warmup_frac <= 0.5:
            raise ValueError("warmup_frac must lie in [0, 0.5]")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError("stage must be pretrain or finetune")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation_steps

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_frac * self.steps)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def cosine_lr(step: int, max_lr: float, total_steps: int, warmup: int) -> float:
    """Linear warmup to ``max_lr``, then half-cosine decay to 0 at ``total_steps``."""
    if warmup >= total_steps:
        raise BadSchedule(f"warmup ({warmup}) must be below total_steps ({total_steps})")
    if not 0 <= step <= total_steps:
        raise BadSchedule(f"step {step} outside [0, {total_steps}]")
    if step < warmup:
        return max_lr * step / warmup
    return max_lr * 0.5 * (1 + math.cos(math.pi * (step - warmup) / (total_steps - warmup)))


class AdamW:
    """Adam with decoupled weight decay over named parameter groups."""

    def __init__(self, groups: dict[str, dict[str, Tensor]], weight_decay: dict[str, float], betas=(0.9, 0.999), eps=1e-8):
        self.groups = groups
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for g in groups.values() for n, p in g.items()}
        self.v = {n: np.zeros_like(p.data) for g in groups.values() for n, p in g.items()}
        self.last_step_sizes: dict[str, float] = {}

    def step(self, lrs: dict[str, float]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for gname, params in self.groups.items():
            lr, wd = lrs[gname], self.weight_decay.get(gname, 0.0)
            self.last_step_sizes[gname] = lr
            for name, p in params.items():
                if p.grad is None:
                    continue
                g = p.grad.astype(p.dtype, copy=False)
                m, v = self.m[name], self.v[name]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if wd:
                    p.data *= 1 - lr * wd
                p.data -= (lr * update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params.values():
                p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{n}": a for n, a in self.m.items()}
        out.update({f"opt.v.{n}": a for n, a in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for n in self.m:
            self.m[n] = arrays[f"opt.m.{n}"].astype(self.m[n].dtype)
            self.v[n] = arrays[f"opt.v.{n}"].astype(self.v[n].dtype)
        self.t = t


# -- teacher outputs -------------------------------------------------------------


def _teacher_records(teacher: ToyVLM, batch: DistillBatch, capture_last: bool) -> list[dict[str, np.ndarray]]:
    ids, _, _ = batch.arrays()
    with T.no_grad():
        trace = teacher.run(batch.patches(), ids, capture_last=capture_last)
    n_v = trace.n_vision
    recs = []
    for b, n_t in enumerate(batch.text_lengths):
        length = n_v + n_t
        rec = {
            "attn_first": trace.attn_first.data[b, :, :length, :length],
            "vision": trace.hidden[0].data[b, :n_v],
            "logits": trace.logits.data[b, n_v:length],
        }
        if capture_last:
            rec["attn_last"] = trace.attn_last.data[b, :, :length, :length]
        recs.append(rec)
    return recs


def _assemble(records: Sequence[dict[str, np.ndarray]], n_vision: int, width: int) -> TeacherOutputs:
    """Zero-pad per-sample teacher records to a ``width``-token text batch."""
    b = len(records)
    length = n_vision + width
    first = records[0]
    h = first["attn_first"].shape[0]
    dtype = first["attn_first"].dtype
    attn = np.zeros((b, h, length, length), dtype=dtype)
    logits = np.zeros((b, width, first["logits"].shape[-1]), dtype=dtype)
    last = np.zeros_like(attn) if "attn_last" in first else None
    for i, rec in enumerate(records):
        n = rec["attn_first"].shape[-1]
        attn[i, :, :n, :n] = rec["attn_first"]
        logits[i, : n - n_vision] = rec["logits"]
        if last is not None:
            last[i, :, :n, :n] = rec["attn_last"]
    vision = np.stack([rec["vision"] for rec in records])
    return TeacherOutputs(attn, vision, logits, last)


class TeacherCache:
    """Teacher outputs keyed by sample hash, in memory and optionally on disk."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self.memory: dict[str, dict[str, np.ndarray]] = {}
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def get(self, key: str, dtype) -> dict[str, np.ndarray] | None:
        if key in self.memory:
            return self.memory[key]
        if self.directory and (self.directory / f"{key}.akd").exists():
            _, arrays = checkpoint.read(self.directory / f"{key}.akd")
            rec = {k: v.astype(dtype) for k, v in arrays.items()}
            self.memory[key] = rec
            return rec
        return None

    def put(self, key: str, rec: dict[str, np.ndarray]) -> None:
        rec = {k: np.array(v) for k, v in rec.items()}
        self.memory[key] = rec
        if self.directory:
            checkpoint.write(self.directory / f"{key}.akd", {"kind": "teacher-trace", "key": key}, rec)


def teacher_outputs(
    teacher: ToyVLM, batch: DistillBatch, capture_last: bool = False, cache: TeacherCache | None = None
) -> TeacherOutputs:
    n_v = teacher.cfg.n_vision_tokens
    width = max(batch.text_lengths)
    if cache is None:
        return _assemble(_teacher_records(teacher, batch, capture_last), n_v, width)
    dtype = teacher.params["head.bias"].dtype
    recs = [cache.get(k, dtype) for k in batch.keys]
    missing = [i for i, r in enumerate(recs) if r is None]
    if missing:
        sub = DistillBatch(
            [batch.images[i] for i in missing],
            [batch.prompt_ids[i] for i in missing],
            [batch.response_ids[i] for i in missing],
            keys=[batch.keys[i] for i in missing],
        )
        for i, rec in zip(missing, _teacher_records(teacher, sub, capture_last)):
            cache.put(batch.keys[i], rec)
            recs[i] = cache.memory[batch.keys[i]]
    return _assemble(recs, n_v, width)


# -- trainer ---------------------------------------------------------------------


class Trainer:
    """Student, frozen teacher, projectors and optimizer state for one run."""

    def __init__(
        self,
        student: ToyVLM,
        cfg: TrainConfig,
        teacher: ToyVLM | None = None,
        projectors: Projectors | None = None,
        cache: TeacherCache | None = None,
        kind: str = "student",
        extra_header: dict[str, str] | None = None,
    ):
        self.kind = kind
        self.extra_header = dict(extra_header or {})
        self.student = student.astype(cfg.precision)
        self.cfg = cfg
        self.teacher = teacher.astype(cfg.precision) if teacher is not None else None
        if cfg.losses.any_kd and teacher is None:
            raise ValueError("distillation terms are enabled but no teacher was given")
        if teacher is not None:
            _check_compatible(student.cfg, teacher.cfg)
            if cfg.losses.enable_v_focus and cfg.losses.k > student.cfg.n_vision_tokens:
                raise ValueError(f"k={cfg.losses.k} exceeds n_vision_tokens={student.cfg.n_vision_tokens}")
        if projectors is None and teacher is not None:
            projectors = Projectors.init(student.cfg, teacher.cfg, cfg.seed, with_last=cfg.losses.needs_last_attention)
        self.projectors = projectors.astype(cfg.dtype) if projectors is not None else None
        self.cache = cache
        self.micro = 0
        self.step = 0
        self.optimizer = AdamW(
            self.param_groups(),
            {"projector": 0.0, "other": cfg.weight_decay},
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.adam_eps,
        )
        self._pending: list[LossReport] = []

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        named = {f"model.{k}": v for k, v in self.student.params.items()}
        if self.projectors is not None:
            named.update({f"proj.{k}": v for k, v in self.projectors.named_parameters().items()})
        proj, other = {}, {}
        for name, p in named.items():
            short = name.split(".", 1)[1]
            (proj if short.startswith(PROJECTOR_PREFIXES) else other)[name] = p
        return {"projector": proj, "other": other}

    def learning_rates(self, step: int | None = None) -> dict[str, float]:
        step = self.step if step is None else step
        other_max = self.cfg.lr_other_max if self.cfg.stage == "pretrain" else self.cfg.lr_finetune_max
        total, warm = self.cfg.steps, self.cfg.warmup_steps
        return {
            "projector": cosine_lr(step, self.cfg.lr_projector_max, total, warm),
            "other": cosine_lr(step, other_max, total, warm),
        }

    def train_step(self, batch: DistillBatch) -> LossReport:
        """One micro-step; the optimizer fires every ``accumulation_steps`` calls."""
        lcfg = self.cfg.losses
        ids, targets, mask = batch.arrays()
        teacher = None
        if lcfg.any_kd:
            teacher = teacher_outputs(self.teacher, batch, lcfg.needs_last_attention, self.cache)
        trace = self.student.run(batch.patches(), ids, capture_last=lcfg.needs_last_attention)
        try:
            total, report = align_kd_objective(trace, teacher, targets, mask, batch.text_lengths, self.projectors, lcfg)
        except NonFiniteComponent as exc:
            self.optimizer.zero_grad()
            raise NonFiniteLoss(exc.term, exc.value) from None
        if not math.isfinite(report.total):
            self.optimizer.zero_grad()
            raise NonFiniteLoss("total", report.total)
        T.scale(total, 1.0 / self.cfg.accumulation_steps).backward()
        self.micro += 1
        self._pending.append(report)
        if self.micro % self.cfg.accumulation_steps == 0:
            self.optimizer.step(self.learning_rates())
            self.optimizer.zero_grad()
            self.step += 1
        return report

    def pop_step_report(self) -> LossReport:
        """Mean of the micro-step reports since the last call."""
        reps, self._pending = self._pending, []
        vals = np.mean([r.values() for r in reps], axis=0)
        out = LossReport(*[float(v) for v in vals])
        out.focus_indices = [fi for r in reps for fi in r.focus_indices]
        return out

    # checkpoints
    def checkpoint_payload(self) -> tuple[dict[str, str], dict[str, np.ndarray]]:
        header = {
            "kind": self.kind,
            "step": str(self.step),
            "seed": str(self.cfg.seed),
            "precision": self.cfg.precision,
            "stage": self.cfg.stage,
            "attn_block": self.cfg.losses.attn_block,
            **self.student.cfg.to_header("model."),
            **self.extra_header,
        }
        if self.teacher is not None:
            header.update(self.teacher.cfg.to_header("teacher."))
        tensors = {f"model.{k}": v for k, v in self.student.state_arrays().items()}
        if self.projectors is not None:
            tensors.update({f"proj.{k}": v.data for k, v in self.projectors.named_parameters().items()})
        tensors.update(self.optimizer.state_arrays())
        return header, tensors

    def save(self, path) -> None:
        header, tensors = self.checkpoint_payload()
        checkpoint.write(path, header, tensors)

    def restore(self, path) -> None:
        header, arrays = checkpoint.read(path)
        if VlmConfig.from_header(header, "model.") != self.student.cfg:
            raise CheckpointError("checkpoint model config differs from the configured student")
        self.student.load_arrays(arrays, "model.")
        if self.projectors is not None:
            for name, p in self.projectors.named_parameters().items():
                key = f"proj.{name}"
                if key not in arrays:
                    raise CheckpointError(f"checkpoint lacks tensor {key!r}")
                p.data = arrays[key].astype(p.dtype)
        self.step = int(header.get("step", 0))
        self.optimizer.load_arrays(arrays, self.step)
        self.micro = self.step * self.cfg.accumulation_steps


def _check_compatible(student: VlmConfig, teacher: VlmConfig) -> None:
    same = ("vocab_size", "patch_rows", "patch_cols", "d_patch", "n_vision_tokens", "max_text_tokens", "frozen_seed")
    diff = [k for k in same if getattr(student, k) != getattr(teacher, k)]
    if diff:
        raise ValueError(f"teacher and student must share {', '.join(diff)}")


def format_metrics_row(step: int, lr: float, report: LossReport) -> list[str]:
    return [str(step), repr(lr)] + [repr(float(v)) for v in report.values()]


def run_training(
    trainer: Trainer,
    samples: Sequence[Sample],
    out_dir: str | Path | None = None,
    log_every: int = 0,
) -> list[list[str]]:
    """Train from ``trainer.step`` up to ``cfg.steps``; returns metric rows.

    With ``out_dir`` set, writes ``metrics.csv`` and ``final.akd`` there
    (and ``step<N>.akd`` every ``checkpoint_every`` steps).
    """
    cfg = trainer.cfg
    loader = BatchLoader(samples, cfg.batch_size, seed=cfg.seed)
    stream = loader.stream()
    for _ in range(trainer.micro):  # resume: replay the sample stream
        next(stream)
    rows: list[list[str]] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while trainer.step < cfg.steps:
        step = trainer.step
        lr = trainer.learning_rates()["other"]
        for _ in range(cfg.accumulation_steps):
            trainer.train_step(next(stream))
        report = trainer.pop_step_report()
        rows.append(format_metrics_row(step, lr, report))
        if log_every and step % log_every == 0:
            log.info("step %d lr %.3g total %.4f sup %.4f", step, lr, report.total, report.l_sup)
        if out is not None and cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
            trainer.save(out / f"step{trainer.step}.akd")
    if out is not None:
        trainer.save(out / "final.akd")
        write_metrics(out / "metrics.csv", rows, append=trainer.step > len(rows))
    return rows


def write_metrics(path: Path, rows: Iterable[Sequence[str]], append: bool = False) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not (append and path.exists()):
        w.writerow(METRICS_HEADER)
        mode = "w"
    else:
        mode = "a"
    w.writerows(rows)
    with open(path, mode, encoding="utf-8") as fh:
        fh.write(buf.getvalue())


# -- evaluation ------------------------------------------------------------------


def evaluate(model: ToyVLM, samples: Sequence[Sample], batch_size: int = 32, greedy: bool = True) -> dict[str, float]:
    """Mean per-sample masked cross-entropy and greedy exact-match rate."""
    if not samples:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    ces = []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = DistillBatch.from_samples(samples[start : start + batch_size])
            ids, targets, mask = batch.arrays()
            trace = model.run(batch.patches(), ids)
            logits = trace.logits.data[:, trace.n_vision :].astype(np.float64)
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
            ces.extend((nll * mask).sum(axis=1) / mask.sum(axis=1))
    result = {"cross_entropy": float(np.mean(ces))}
    if greedy:
        hits = 0
        for s in samples:
            answer = s.response_ids[:-1] if s.response_ids[-1] == EOS_ID else list(s.response_ids)
            out = generate_greedy(model, s.image_patches, s.prompt_ids, max_new=len(s.response_ids))
            hits += out == answer
        result["exact_match"] = hits / len(samples)
    return result
