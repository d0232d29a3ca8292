"""Cross-modal distillation objective.

Terms, all computed on the student with the teacher held constant:

* first-layer attention distillation on the text-query-vision block
  (or another block for ablations), through a head-mixing projector;
* vision-token distillation on all tokens plus a weighted term on the
  top-K tokens the teacher's text attends to most;
* reverse KL divergence between output distributions;
* the ordinary supervised cross-entropy.

Every loss accepts an optional leading batch axis.  Batched losses are the
mean over samples of the per-sample value, so equal-size micro-batches
average exactly to the full-batch loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import (
    BadK,
    BadPartition,
    EmptyMask,
    IndexOutOfRange,
    NegativeAttention,
    NegativeLambda,
    NonFiniteComponent,
    NotCausal,
    ShapeMismatch,
    VocabMismatch,
)
from .tensor import Tensor

ATTN_BLOCKS = ("tv", "vv", "tt", "all", "all_plus_last")
HEAD_REDUCTIONS = ("mean", "sum")


# -- attention partitioning ------------------------------------------------------


@dataclass
class AttentionSplit:
    a_vv: Tensor
    a_tv: Tensor
    a_tt: Tensor

    def reassemble(self) -> np.ndarray:
        n_v, n_t = self.a_vv.shape[-1], self.a_tt.shape[-1]
        lead = self.a_vv.shape[:-2]
        out = np.zeros((*lead, n_v + n_t, n_v + n_t), dtype=self.a_vv.dtype)
        out[..., :n_v, :n_v] = self.a_vv.data
        out[..., n_v:, :n_v] = self.a_tv.data
        out[..., n_v:, n_v:] = self.a_tt.data
        return out


def split_attention(attn: Tensor, n_vision: int) -> AttentionSplit:
    """Cut a causal ``[..., L, L]`` attention map into its three lower blocks."""
    length = attn.shape[-1]
    if attn.shape[-2] != length:
        raise ShapeMismatch(f"attention must be square in its last two axes, got {attn.shape}")
    if not 0 < n_vision < length:
        raise BadPartition(f"n_vision={n_vision} must lie in (0, {length})")
    if np.any(attn.data[..., np.triu(np.ones((length, length), dtype=bool), k=1)] != 0):
        raise NotCausal("attention has nonzero entries above the diagonal")
    return AttentionSplit(
        a_vv=attn[..., :n_vision, :n_vision],
        a_tv=attn[..., n_vision:, :n_vision],
        a_tt=attn[..., n_vision:, n_vision:],
    )


# -- projectors ----------------------------------------------------------------


class HeadProjector:
    """Per-position linear mix of teacher heads into student heads (a 1x1 conv)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def init(cls, n_student: int, n_teacher: int, rng: np.random.Generator) -> HeadProjector:
        bound = 1.0 / math.sqrt(n_teacher)
        return cls(rng.uniform(-bound, bound, (n_student, n_teacher)), np.zeros(n_student))

    @classmethod
    def identity(cls, n: int) -> HeadProjector:
        return cls(np.eye(n), np.zeros(n))

    def __call__(self, x: Tensor) -> Tensor:
        h_s, h_t = self.weight.shape
        if x.ndim < 3 or x.shape[-3] != h_t:
            raise ShapeMismatch(f"expected [..., {h_t}, rows, cols], got {x.shape}")
        lead, rows, cols = x.shape[:-3], x.shape[-2], x.shape[-1]
        flat = x.reshape(*lead, h_t, rows * cols)
        mixed = self.weight @ flat + self.bias.reshape(h_s, 1)
        return mixed.reshape(*lead, h_s, rows, cols)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class EmbedProjector:
    """Per-token linear map from teacher width to student width (a 1x1 conv)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Tensor(weight, requires_grad=True)  # [d_student, d_teacher]
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def init(cls, d_student: int, d_teacher: int, rng: np.random.Generator) -> EmbedProjector:
        bound = 1.0 / math.sqrt(d_teacher)
        return cls(rng.uniform(-bound, bound, (d_student, d_teacher)), np.zeros(d_student))

    @classmethod
    def identity(cls, d: int) -> EmbedProjector:
        return cls(np.eye(d), np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeMismatch(f"expected width {self.weight.shape[1]}, got {x.shape}")
        return x @ self.weight.transpose() + self.bias

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class Projectors:
    p_attn: HeadProjector
    p_v: EmbedProjector
    p_attn_last: HeadProjector | None = None

    @classmethod
    def init(cls, student_cfg, teacher_cfg, seed: int, with_last: bool = False) -> Projectors:
        rng = np.random.default_rng([seed, 7])
        return cls(
            HeadProjector.init(student_cfg.n_heads, teacher_cfg.n_heads, rng),
            EmbedProjector.init(student_cfg.d_model, teacher_cfg.d_model, rng),
            HeadProjector.init(student_cfg.n_heads, teacher_cfg.n_heads, rng) if with_last else None,
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in ("p_attn", "p_v", "p_attn_last"):
            mod = getattr(self, name)
            if mod is not None:
                out.update({f"{name}.{k}": v for k, v in mod.parameters().items()})
        return out

    def astype(self, dtype) -> Projectors:
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


# -- masking helpers -------------------------------------------------------------


def masked_mse(pred: Tensor, target: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Element-mean squared error; with ``mask`` ([B, ...]) a mean of per-sample masked means."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse operands differ in shape: {pred.shape} vs {target.shape}")
    if mask is None:
        return T.mse(pred, target)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    flat = mask.reshape(mask.shape[0], -1)
    counts = flat.sum(axis=1)
    if np.any(counts == 0):
        raise EmptyMask("a sample has no valid elements")
    weights = (mask / counts.reshape((-1,) + (1,) * (mask.ndim - 1)) / mask.shape[0]).astype(pred.dtype)
    d = pred - target
    return (d * d * Tensor(weights)).sum()


def _text_mask(n_text: int, text_lengths: Sequence[int]) -> np.ndarray:
    return np.arange(n_text)[None, :] < np.asarray(text_lengths)[:, None]


# -- attention distillation ------------------------------------------------------


def attn_tv_loss(
    teacher_tv: Tensor, student_tv: Tensor, p: HeadProjector, text_lengths: Sequence[int] | None = None
) -> Tensor:
    """MSE between head-projected teacher and student text-query-vision attention.

    Shapes ``[H, N_t, N_v]`` or ``[B, H, N_t, N_v]``; ``text_lengths`` masks
    padded text rows in a batch.
    """
    if teacher_tv.shape[-2:] != student_tv.shape[-2:]:
        raise ShapeMismatch(f"(N_t, N_v) differ: {teacher_tv.shape} vs {student_tv.shape}")
    projected = p(teacher_tv)
    mask = None
    if text_lengths is not None:
        mask = _text_mask(student_tv.shape[-2], text_lengths)[:, None, :, None]
    return masked_mse(projected, student_tv, mask)


def attention_block_loss(
    teacher_attn: Tensor,
    student_attn: Tensor,
    n_vision: int,
    block: str,
    p: HeadProjector,
    text_lengths: Sequence[int] | None = None,
) -> Tensor:
    """Attention distillation on one region of the first-layer map.

    ``block`` is one of tv, vv, tt or all.  Padded text rows and columns
    are excluded when ``text_lengths`` is given.
    """
    if block == "tv":
        t_split, s_split = split_attention(teacher_attn, n_vision), split_attention(student_attn, n_vision)
        return attn_tv_loss(t_split.a_tv, s_split.a_tv, p, text_lengths)
    if block == "vv":
        t_split, s_split = split_attention(teacher_attn, n_vision), split_attention(student_attn, n_vision)
        return masked_mse(p(t_split.a_vv), s_split.a_vv)
    if block == "tt":
        t_split, s_split = split_attention(teacher_attn, n_vision), split_attention(student_attn, n_vision)
        mask = None
        if text_lengths is not None:
            tm = _text_mask(s_split.a_tt.shape[-1], text_lengths)
            mask = (tm[:, :, None] & tm[:, None, :])[:, None]
        return masked_mse(p(t_split.a_tt), s_split.a_tt, mask)
    if block == "all":
        mask = None
        if text_lengths is not None:
            length = student_attn.shape[-1]
            valid = np.arange(length)[None, :] < n_vision + np.asarray(text_lengths)[:, None]
            mask = (valid[:, :, None] & valid[:, None, :])[:, None]
        return masked_mse(p(teacher_attn), student_attn, mask)
    raise ValueError(f"unknown attention block {block!r}")


# -- text-focused vision token distillation --------------------------------------


def focus_scores(
    teacher_tv: Tensor, text_lengths: Sequence[int] | None = None, head_reduction: str = "mean"
) -> Tensor:
    """Per-vision-token score: attention summed over text queries, reduced over heads.

    Input ``[H, N_t, N_v]`` or ``[B, H, N_t, N_v]``; output ``[N_v]`` or ``[B, N_v]``.
    """
    a = teacher_tv.data
    if np.any(a < 0):
        raise NegativeAttention("attention weights must be nonnegative")
    if text_lengths is not None:
        a = a * _text_mask(a.shape[-2], text_lengths)[:, None, :, None]
    per_head = a.sum(axis=-2)
    if head_reduction == "mean":
        scores = per_head.mean(axis=-2)
    elif head_reduction == "sum":
        scores = per_head.sum(axis=-2)
    else:
        raise ValueError(f"unknown head reduction {head_reduction!r}")
    return Tensor(scores)


def topk_indices(scores, k: int):
    """Ascending indices of the ``k`` largest scores, ties to the lower index.

    A ``[B, N_v]`` score matrix yields one index list per row.
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    n = s.shape[-1]
    if not 1 <= k <= n:
        raise BadK(f"k={k} must lie in [1, {n}]")
    if s.ndim == 2:
        return [topk_indices(row, k) for row in s]
    order = np.argsort(-s, kind="stable")[:k]
    return sorted(int(i) for i in order)


def _gather_rows(x: Tensor, idx) -> Tensor:
    arr = np.asarray(idx, dtype=np.int64)
    n = x.shape[-2]
    if arr.size == 0:
        raise IndexOutOfRange("empty index list")
    if np.any((arr < 0) | (arr >= n)):
        raise IndexOutOfRange(f"index outside [0, {n})")
    if x.ndim == 2:
        if arr.ndim != 1:
            raise ShapeMismatch("unbatched embeddings need a flat index list")
        return x[arr]
    if arr.ndim != 2 or arr.shape[0] != x.shape[0]:
        raise ShapeMismatch("batched embeddings need one index list per sample")
    return x[np.arange(x.shape[0])[:, None], arr]


def vision_focus_loss(teacher_emb: Tensor, student_emb: Tensor, idx, p: EmbedProjector) -> Tensor:
    """MSE between projected teacher and student vision tokens at ``idx`` only."""
    if teacher_emb.shape[:-1] != student_emb.shape[:-1]:
        raise ShapeMismatch(f"token layouts differ: {teacher_emb.shape} vs {student_emb.shape}")
    return T.mse(p(_gather_rows(teacher_emb, idx)), _gather_rows(student_emb, idx))


def vision_all_loss(teacher_emb: Tensor, student_emb: Tensor, p: EmbedProjector) -> Tensor:
    if teacher_emb.shape[:-1] != student_emb.shape[:-1]:
        raise ShapeMismatch(f"token layouts differ: {teacher_emb.shape} vs {student_emb.shape}")
    return T.mse(p(teacher_emb), student_emb)


def vision_loss(l_all, l_focus, lam: float):
    if lam < 0:
        raise NegativeLambda(f"lambda must be >= 0, got {lam}")
    if isinstance(l_all, Tensor) or isinstance(l_focus, Tensor):
        return T.add(l_all, T.scale(T._lift(l_focus, l_all if isinstance(l_all, Tensor) else None), lam))
    return l_all + lam * l_focus


# -- output distillation ---------------------------------------------------------


def rkld(student_logits: Tensor, teacher_logits, mask, eps: float | None = 1e-8) -> Tensor:
    """Reverse KL, KL(p_student || p_teacher), averaged over masked-in positions.

    The teacher side is a constant.  ``eps`` floors the teacher probability
    inside the log; ``None`` evaluates the exact expression.
    """
    t_logits = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits)
    if student_logits.shape[-1] != t_logits.shape[-1]:
        raise VocabMismatch(f"vocab sizes differ: {student_logits.shape[-1]} vs {t_logits.shape[-1]}")
    mask = np.asarray(mask, dtype=bool)
    if student_logits.shape != t_logits.shape or mask.shape != student_logits.shape[:-1]:
        raise ShapeMismatch(f"student {student_logits.shape}, teacher {t_logits.shape}, mask {mask.shape}")
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise EmptyMask("no masked-in position")
    n_samples = int(np.prod(mask.shape[:-1])) if mask.ndim > 1 else 1
    weights = (mask / counts / n_samples).astype(student_logits.dtype)

    z = t_logits - t_logits.max(axis=-1, keepdims=True)
    log_pt = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    if eps is not None:
        log_pt = np.maximum(log_pt, math.log(eps))
    log_ps = T.log_softmax(student_logits)
    ps = T.exp(log_ps)
    per_pos = (ps * (log_ps - Tensor(log_pt.astype(student_logits.dtype)))).sum(axis=-1)
    return (per_pos * Tensor(weights)).sum()


# -- total -----------------------------------------------------------------------


@dataclass
class LossReport:
    l_sup: float
    l_attn_tv: float
    l_v_focus: float
    l_v_all: float
    l_v: float
    l_rkld: float
    total: float
    focus_indices: list = field(default_factory=list)

    CSV_FIELDS = ("l_sup", "l_attn_tv", "l_v_focus", "l_v_all", "l_v", "l_rkld", "total")

    def values(self) -> list[float]:
        return [getattr(self, f) for f in self.CSV_FIELDS]


def _as_float(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(l_sup, l_attn_tv, l_v, l_rkld, *, l_v_focus=0.0, l_v_all=None, focus_indices=()) -> LossReport:
    """Unit-weight sum of the four terms, packaged as a report."""
    comps = {
        "l_sup": l_sup,
        "l_attn_tv": l_attn_tv,
        "l_v_focus": l_v_focus,
        "l_v_all": l_v if l_v_all is None else l_v_all,
        "l_v": l_v,
        "l_rkld": l_rkld,
    }
    vals = {k: _as_float(v) for k, v in comps.items()}
    for name, v in vals.items():
        if not math.isfinite(v):
            raise NonFiniteComponent(name, v)
        if v < -1e-9:
            raise ValueError(f"{name} is negative: {v}")
    total = vals["l_sup"] + vals["l_attn_tv"] + vals["l_v"] + vals["l_rkld"]
    return LossReport(total=total, focus_indices=list(focus_indices), **vals)


# -- objective builder -----------------------------------------------------------


@dataclass
class LossConfig:
    enable_rkld: bool = True
    enable_attn_tv: bool = True
    enable_v_all: bool = True
    enable_v_focus: bool = True
    attn_block: str = "tv"
    lam: float = 0.1
    k: int = 16
    head_reduction: str = "mean"
    rkld_eps: float = 1e-8

    def __post_init__(self):
        if self.attn_block not in ATTN_BLOCKS:
            raise ValueError(f"attn_block must be one of {ATTN_BLOCKS}")
        if self.head_reduction not in HEAD_REDUCTIONS:
            raise ValueError(f"head_reduction must be one of {HEAD_REDUCTIONS}")
        if self.lam < 0:
            raise NegativeLambda(f"lambda must be >= 0, got {self.lam}")
        if self.k < 1:
            raise BadK("k must be >= 1")

    @property
    def any_kd(self) -> bool:
        return self.enable_rkld or self.enable_attn_tv or self.enable_v_all or self.enable_v_focus

    @property
    def needs_last_attention(self) -> bool:
        return self.enable_attn_tv and self.attn_block == "all_plus_last"

    @classmethod
    def supervised_only(cls, **kw) -> LossConfig:
        return cls(enable_rkld=False, enable_attn_tv=False, enable_v_all=False, enable_v_focus=False, **kw)


@dataclass
class TeacherOutputs:
    """Constant teacher quantities for one batch (arrays, no gradients)."""

    attn_first: np.ndarray  # [B, H_T, L, L]
    vision: np.ndarray  # [B, N_v, d_T]
    logits: np.ndarray  # [B, N_t, V], text positions only
    attn_last: np.ndarray | None = None


def align_kd_objective(
    student_trace,
    teacher: TeacherOutputs | None,
    targets: np.ndarray,
    target_mask: np.ndarray,
    text_lengths: Sequence[int],
    projectors: Projectors | None,
    cfg: LossConfig,
) -> tuple[Tensor, LossReport]:
    """Build the total loss for a batched student trace.

    Disabled terms are never constructed, so their projectors receive no
    gradient.  Returns the differentiable total and its report.
    """
    n_v = student_trace.n_vision
    text_logits = student_trace.logits[:, n_v:]
    l_sup = T.cross_entropy_masked(text_logits, targets, target_mask)
    zero = Tensor(np.zeros((), dtype=l_sup.dtype))
    l_attn = l_v_all = l_v_focus = l_rkld = zero
    focus: list = []

    if cfg.any_kd and (teacher is None or projectors is None):
        raise ValueError("distillation terms enabled without teacher outputs or projectors")
    if cfg.enable_attn_tv:
        block = "all" if cfg.attn_block == "all_plus_last" else cfg.attn_block
        l_attn = attention_block_loss(
            Tensor(teacher.attn_first), student_trace.attn_first, n_v, block, projectors.p_attn, text_lengths
        )
        if cfg.attn_block == "all_plus_last":
            if teacher.attn_last is None or student_trace.attn_last is None or projectors.p_attn_last is None:
                raise ValueError("last-layer attention distillation needs captured last-layer maps")
            l_attn = l_attn + attention_block_loss(
                Tensor(teacher.attn_last), student_trace.attn_last, n_v, "all", projectors.p_attn_last, text_lengths
            )
    student_vision = student_trace.hidden[0][:, :n_v]
    teacher_vision = Tensor(teacher.vision) if teacher is not None else None
    if cfg.enable_v_all:
        l_v_all = vision_all_loss(teacher_vision, student_vision, projectors.p_v)
    if cfg.enable_v_focus:
        t_tv = Tensor(teacher.attn_first[:, :, n_v:, :n_v])
        scores = focus_scores(t_tv, text_lengths, cfg.head_reduction)
        focus = topk_indices(scores, cfg.k)
        l_v_focus = vision_focus_loss(teacher_vision, student_vision, focus, projectors.p_v)
    l_v = vision_loss(l_v_all, l_v_focus, cfg.lam)
    if cfg.enable_rkld:
        l_rkld = rkld(text_logits, teacher.logits, target_mask, cfg.rkld_eps)

    total = l_sup + l_attn + l_v + l_rkld
    report = total_loss(l_sup, l_attn, l_v, l_rkld, l_v_focus=l_v_focus, l_v_all=l_v_all, focus_indices=focus)
    return total, report
