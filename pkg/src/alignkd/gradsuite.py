"""Finite-difference checks of every loss term and of the full objective.

Shapes are tiny (2-layer d=8 student, 3-layer d=16 teacher, 4 vision
tokens, up to 6 text tokens) and everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import (
    EmbedProjector,
    HeadProjector,
    LossConfig,
    Projectors,
    TeacherOutputs,
    align_kd_objective,
    attention_block_loss,
    rkld,
    topk_indices,
    focus_scores,
    vision_all_loss,
    vision_focus_loss,
)
from .tensor import GradCheckReport, Tensor
from .vlm import ToyVLM, VlmConfig

STUDENT = VlmConfig(
    d_model=8, n_heads=2, n_layers=2, vocab_size=16, patch_rows=4, patch_cols=2, d_patch=4,
    n_vision_tokens=4, max_text_tokens=8, seed=3,
)
TEACHER = VlmConfig(
    d_model=16, n_heads=4, n_layers=3, vocab_size=16, patch_rows=4, patch_cols=2, d_patch=4,
    n_vision_tokens=4, max_text_tokens=8, seed=4,
)
TEXT_LENGTHS = (6, 4)


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _leaf(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _attention(rng, batch, heads, length) -> np.ndarray:
    """Random causal row-stochastic maps [B, H, L, L]."""
    logits = rng.normal(size=(batch, heads, length, length))
    logits = np.where(np.tril(np.ones((length, length), dtype=bool)), logits, -np.inf)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _fixture(seed: int = 0):
    rng = np.random.default_rng(seed)
    n_v, n_t, b = STUDENT.n_vision_tokens, max(TEXT_LENGTHS), len(TEXT_LENGTHS)
    ids = np.zeros((b, n_t), dtype=np.int64)
    for i, n in enumerate(TEXT_LENGTHS):
        ids[i, :n] = rng.integers(3, STUDENT.vocab_size, size=n)
    targets = np.roll(ids, -1, axis=1)
    mask = np.zeros((b, n_t), dtype=bool)
    for i, n in enumerate(TEXT_LENGTHS):
        mask[i, 1 : n - 1] = True
    patches = rng.normal(size=(b, STUDENT.n_patches, STUDENT.d_patch))
    return rng, n_v, n_t, b, ids, targets, mask, patches


def _head_projector(rng, hs, ht) -> HeadProjector:
    return HeadProjector(rng.normal(size=(hs, ht)), rng.normal(size=hs))


def _check(name, f, named: dict[str, Tensor], step, tol) -> CheckResult:
    return CheckResult(name, T.grad_check(f, list(named.values()), step=step, tolerance=tol, names=list(named)))


def term_checks(step: float = 1e-6, tolerance: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    """Each loss term with respect to its student-side input and its projector."""
    results = []
    with T.precision("f64"):
        rng, n_v, n_t, b, ids, targets, mask, _ = _fixture(seed)
        length = n_v + n_t
        hs, ht, ds, dt = STUDENT.n_heads, TEACHER.n_heads, STUDENT.d_model, TEACHER.d_model

        logits = _leaf(rng, (b, n_t, STUDENT.vocab_size))
        results.append(_check("l_sup", lambda: T.cross_entropy_masked(logits, targets, mask), {"logits": logits}, step, tolerance))

        t_attn = Tensor(_attention(rng, b, ht, length))
        for block in ("tv", "vv", "tt", "all"):
            raw = _leaf(rng, (b, hs, length, length))
            causal = np.tril(np.ones((length, length), dtype=bool))
            p = _head_projector(rng, hs, ht)

            def f(raw=raw, p=p, block=block):
                s_attn = T.softmax_rows(raw, causal)
                return attention_block_loss(t_attn, s_attn, n_v, block, p, TEXT_LENGTHS)

            named = {"student_scores": raw, **{f"p_attn.{k}": v for k, v in p.parameters().items()}}
            results.append(_check(f"l_attn[{block}]", f, named, step, tolerance))

        t_vis = Tensor(rng.normal(size=(b, n_v, dt)))
        s_vis = _leaf(rng, (b, n_v, ds))
        pv = EmbedProjector(rng.normal(size=(ds, dt)) / np.sqrt(dt), rng.normal(size=ds))
        named = {"student_vision": s_vis, **{f"p_v.{k}": v for k, v in pv.parameters().items()}}
        results.append(_check("l_v_all", lambda: vision_all_loss(t_vis, s_vis, pv), named, step, tolerance))
        idx = topk_indices(focus_scores(Tensor(t_attn.data[:, :, n_v:, :n_v]), TEXT_LENGTHS), 2)
        results.append(_check("l_v_focus", lambda: vision_focus_loss(t_vis, s_vis, idx, pv), named, step, tolerance))

        t_logits = rng.normal(size=(b, n_t, STUDENT.vocab_size))
        s_logits = _leaf(rng, (b, n_t, STUDENT.vocab_size))
        results.append(_check("l_rkld", lambda: rkld(s_logits, t_logits, mask, eps=None), {"student_logits": s_logits}, step, tolerance))
    return results


def composite_check(
    step: float = 1e-6, tolerance: float = 1e-5, seed: int = 0, attn_block: str = "tv"
) -> CheckResult:
    """The full objective with respect to every student and projector parameter."""
    with T.precision("f64"):
        _, n_v, n_t, b, ids, targets, mask, patches = _fixture(seed)
        student = ToyVLM(STUDENT).astype("f64")
        teacher = ToyVLM(TEACHER).astype("f64")
        cfg = LossConfig(attn_block=attn_block, k=2, lam=0.5, rkld_eps=None)
        with T.no_grad():
            tr = teacher.run(patches, ids, capture_last=cfg.needs_last_attention)
        outputs = TeacherOutputs(
            attn_first=tr.attn_first.data,
            vision=tr.hidden[0].data[:, :n_v],
            logits=tr.logits.data[:, n_v:],
            attn_last=tr.attn_last.data if tr.attn_last is not None else None,
        )
        projectors = Projectors.init(STUDENT, TEACHER, seed, with_last=cfg.needs_last_attention).astype(np.float64)
        # random biases so that their gradients are exercised away from zero
        rng = np.random.default_rng([seed, 11])
        for p in projectors.named_parameters().values():
            p.data = p.data + 0.1 * rng.normal(size=p.shape)

        def f() -> Tensor:
            trace = student.run(patches, ids, capture_last=cfg.needs_last_attention)
            total, _ = align_kd_objective(trace, outputs, targets, mask, list(TEXT_LENGTHS), projectors, cfg)
            return total

        named = {f"model.{k}": v for k, v in student.named_trainable().items()}
        named.update({f"proj.{k}": v for k, v in projectors.named_parameters().items()})
        suffix = "" if attn_block == "tv" else f"[{attn_block}]"
        return _check(f"total{suffix}", f, named, step, tolerance)


def run_suite(step: float = 1e-6, tolerance: float = 1e-5, seed: int = 0, full: bool = True) -> list[CheckResult]:
    results = term_checks(step, tolerance, seed)
    results.append(composite_check(step, tolerance, seed))
    if full:
        results.append(composite_check(step, tolerance, seed, attn_block="all_plus_last"))
    return results


def format_table(results: list[CheckResult], write: Callable[[str], None] = print) -> None:
    width = max(len(r.name) for r in results)
    write(f"{'check':<{width}}  {'max_rel_err':>12}  result")
    for r in results:
        write(f"{r.name:<{width}}  {r.report.max_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
