"""A miniature vision-language model.

Frozen patch embedder -> trainable pooling projector -> decoder-only causal
transformer over ``[vision tokens ; text tokens]``, with the text embedding
table frozen and tied to the output head.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import (
    CheckpointError,
    IndivisibleGrouping,
    InvalidTokenId,
    SequenceTooLong,
    ShapeMismatch,
)
from .tensor import Tensor

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


@dataclass(frozen=True)
class VlmConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    vocab_size: int = 256
    patch_rows: int = 8
    patch_cols: int = 8
    d_patch: int = 16
    n_vision_tokens: int = 16
    max_text_tokens: int = 24
    seed: int = 0
    # shared by teacher and student so the frozen pathways agree
    frozen_seed: int = 1234
    d_ff: int = 0  # 0 means 4 * d_model

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        if self.n_patches % self.n_vision_tokens:
            raise IndivisibleGrouping(
                f"{self.n_patches} patches cannot be pooled into {self.n_vision_tokens} equal groups"
            )
        if min(self.vocab_size, self.d_patch, self.max_text_tokens) < 1:
            raise ValueError("vocab_size, d_patch and max_text_tokens must be positive")

    @property
    def n_patches(self) -> int:
        return self.patch_rows * self.patch_cols

    @property
    def patch_grid(self) -> tuple[int, int]:
        return (self.patch_rows, self.patch_cols)

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_header(self, prefix: str = "") -> dict[str, str]:
        return {f"{prefix}{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_header(cls, header: dict[str, str], prefix: str = "") -> VlmConfig:
        kwargs = {}
        for f in fields(cls):
            key = prefix + f.name
            if key in header:
                kwargs[f.name] = int(header[key])
        return cls(**kwargs)


@dataclass
class ToyImage:
    patch_features: np.ndarray  # [n_patches, d_patch]

    def __post_init__(self):
        self.patch_features = np.asarray(self.patch_features, dtype=np.float64)
        if not np.all(np.isfinite(self.patch_features)):
            raise ValueError("image has non-finite patch features")


@dataclass
class FrozenWeights:
    patch_weight: Tensor  # [d_patch, d_patch]
    patch_pos: Tensor  # [n_patches, d_patch]
    text_table: Tensor  # [vocab, d_model]
    text_pos: Tensor  # [max_text_tokens, d_model]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name).data for f in fields(self)}


@dataclass
class ForwardTrace:
    hidden: list[Tensor]
    attn_first: Tensor
    attn_last: Tensor | None
    logits: Tensor
    n_vision: int
    n_text: int


def sinusoidal_table(n: int, d: int, amplitude: float = 1.0) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return amplitude * np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def make_frozen(cfg: VlmConfig) -> FrozenWeights:
    rng = np.random.default_rng(cfg.frozen_seed)
    patch_weight = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_patch), (cfg.d_patch, cfg.d_patch)) + np.eye(cfg.d_patch)
    # the text table draws from its own stream so its values do not depend on the image embedder
    table_rng = np.random.default_rng([cfg.frozen_seed, cfg.d_model])
    table = table_rng.normal(0.0, 1.0 / np.sqrt(cfg.d_model), (cfg.vocab_size, cfg.d_model))
    return FrozenWeights(
        patch_weight=Tensor(patch_weight),
        patch_pos=Tensor(sinusoidal_table(cfg.n_patches, cfg.d_patch, 0.5)),
        text_table=Tensor(table),
        text_pos=Tensor(sinusoidal_table(cfg.max_text_tokens, cfg.d_model, 1.0 / np.sqrt(cfg.d_model))),
    )


def init_params(cfg: VlmConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d_model, cfg.ff_width
    resid_std = 1.0 / np.sqrt(2 * cfg.n_layers)

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    p = {
        "vision.weight": normal((cfg.d_patch, d), 1.0 / np.sqrt(cfg.d_patch)),
        "vision.bias": zeros(d),
    }
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        p[pre + "ln1.gain"] = ones(d)
        p[pre + "ln1.bias"] = zeros(d)
        p[pre + "attn.qkv.weight"] = normal((d, 3 * d), 1.0 / np.sqrt(d))
        p[pre + "attn.qkv.bias"] = zeros(3 * d)
        p[pre + "attn.out.weight"] = normal((d, d), resid_std / np.sqrt(d))
        p[pre + "attn.out.bias"] = zeros(d)
        p[pre + "ln2.gain"] = ones(d)
        p[pre + "ln2.bias"] = zeros(d)
        p[pre + "ff.in.weight"] = normal((d, f), 1.0 / np.sqrt(d))
        p[pre + "ff.in.bias"] = zeros(f)
        p[pre + "ff.out.weight"] = normal((f, d), resid_std / np.sqrt(f))
        p[pre + "ff.out.bias"] = zeros(d)
    p["final_ln.gain"] = ones(d)
    p["final_ln.bias"] = zeros(d)
    p["head.bias"] = zeros(cfg.vocab_size)
    return p


# -- embedding pathways ----------------------------------------------------------


def embed_image(img, cfg: VlmConfig, frozen: FrozenWeights) -> Tensor:
    """Frozen linear patch embedding plus positional offsets.

    Accepts a :class:`ToyImage`, a ``[n_patches, d_patch]`` array, or a
    ``[B, n_patches, d_patch]`` batch.  The result never tracks gradients.
    """
    x = img.patch_features if isinstance(img, ToyImage) else np.asarray(img)
    if x.shape[-2:] != (cfg.n_patches, cfg.d_patch):
        raise ShapeMismatch(f"expected patches [{cfg.n_patches}, {cfg.d_patch}], got {x.shape}")
    w, pos = frozen.patch_weight.data, frozen.patch_pos.data
    return Tensor(x.astype(w.dtype) @ w + pos)


def project_vision(patches: Tensor, cfg: VlmConfig, params: dict[str, Tensor]) -> Tensor:
    """Average-pool contiguous patch groups, then an affine map to d_model."""
    n = patches.shape[-2]
    if n % cfg.n_vision_tokens:
        raise IndivisibleGrouping(f"{n} patches cannot be split into {cfg.n_vision_tokens} groups")
    group = n // cfg.n_vision_tokens
    lead = patches.shape[:-2]
    pooled = patches.reshape(*lead, cfg.n_vision_tokens, group, patches.shape[-1]).mean(axis=-2)
    return pooled @ params["vision.weight"] + params["vision.bias"]


def embed_text(token_ids, cfg: VlmConfig, frozen: FrozenWeights) -> Tensor:
    """Frozen table lookup plus positional offsets; ``[T]`` or ``[B, T]`` ids."""
    ids = np.asarray(token_ids, dtype=np.int64)
    n = ids.shape[-1] if ids.ndim else 0
    if ids.ndim == 0 or n == 0:
        raise SequenceTooLong("empty token sequence")
    if n > cfg.max_text_tokens:
        raise SequenceTooLong(f"{n} tokens exceeds max_text_tokens={cfg.max_text_tokens}")
    if np.any((ids < 0) | (ids >= cfg.vocab_size)):
        raise InvalidTokenId(f"token id outside [0, {cfg.vocab_size})")
    return Tensor(frozen.text_table.data[ids] + frozen.text_pos.data[:n])


# -- transformer ---------------------------------------------------------------


def _attention(x: Tensor, params: dict[str, Tensor], pre: str, cfg: VlmConfig, causal: np.ndarray):
    b, length, d = x.shape
    h, dh = cfg.n_heads, cfg.head_dim
    qkv = x @ params[pre + "attn.qkv.weight"] + params[pre + "attn.qkv.bias"]
    qkv = qkv.reshape(b, length, 3, h, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(q @ k.swapaxes(-1, -2), 1.0 / np.sqrt(dh))
    probs = T.softmax_rows(scores, causal)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, length, d)
    return ctx @ params[pre + "attn.out.weight"] + params[pre + "attn.out.bias"], probs


def forward(
    vision_tokens: Tensor,
    text_tokens: Tensor,
    params: dict[str, Tensor],
    cfg: VlmConfig,
    frozen: FrozenWeights,
    capture_last: bool = False,
) -> ForwardTrace:
    """Run the decoder over ``[vision ; text]``.

    Inputs are ``[N, d_model]`` or batched ``[B, N, d_model]``; the trace
    keeps the same batching.
    """
    if vision_tokens.shape[-1] != cfg.d_model or text_tokens.shape[-1] != cfg.d_model:
        raise ShapeMismatch("token widths must equal d_model")
    if vision_tokens.ndim != text_tokens.ndim or vision_tokens.shape[:-2] != text_tokens.shape[:-2]:
        raise ShapeMismatch(f"vision {vision_tokens.shape} and text {text_tokens.shape} batch layouts differ")
    unbatched = vision_tokens.ndim == 2
    if unbatched:
        vision_tokens = vision_tokens.reshape(1, *vision_tokens.shape)
        text_tokens = text_tokens.reshape(1, *text_tokens.shape)
    n_v, n_t = vision_tokens.shape[1], text_tokens.shape[1]
    length = n_v + n_t
    if length < 1:
        raise ShapeMismatch("empty sequence")
    causal = np.tri(length, dtype=bool)

    x = T.concat([vision_tokens, text_tokens], axis=1)
    hidden = [x]
    attn_first = attn_last = None
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        a, probs = _attention(
            T.layer_norm(x, params[pre + "ln1.gain"], params[pre + "ln1.bias"]), params, pre, cfg, causal
        )
        x = x + a
        hmid = T.layer_norm(x, params[pre + "ln2.gain"], params[pre + "ln2.bias"])
        hmid = T.gelu(hmid @ params[pre + "ff.in.weight"] + params[pre + "ff.in.bias"])
        x = x + (hmid @ params[pre + "ff.out.weight"] + params[pre + "ff.out.bias"])
        hidden.append(x)
        if i == 0:
            attn_first = probs
        if capture_last and i == cfg.n_layers - 1:
            attn_last = probs
    out = T.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    table_t = Tensor(frozen.text_table.data.T)
    logits = out @ table_t + params["head.bias"]

    if unbatched:
        hidden = [hs[0] for hs in hidden]
        attn_first = attn_first[0]
        attn_last = attn_last[0] if attn_last is not None else None
        logits = logits[0]
    return ForwardTrace(hidden, attn_first, attn_last, logits, n_v, n_t)


class ToyVLM:
    """Parameters, frozen weights and config of one model instance."""

    def __init__(self, cfg: VlmConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.frozen = make_frozen(cfg)

    # pathways
    def embed_image(self, images) -> Tensor:
        return embed_image(images, self.cfg, self.frozen)

    def project_vision(self, patches: Tensor) -> Tensor:
        return project_vision(patches, self.cfg, self.params)

    def embed_text(self, token_ids) -> Tensor:
        return embed_text(token_ids, self.cfg, self.frozen)

    def forward(self, vision_tokens: Tensor, text_tokens: Tensor, capture_last: bool = False) -> ForwardTrace:
        return forward(vision_tokens, text_tokens, self.params, self.cfg, self.frozen, capture_last)

    def run(self, images, token_ids, capture_last: bool = False) -> ForwardTrace:
        """Images (patch arrays) and token ids straight to a trace."""
        vision = self.project_vision(self.embed_image(images))
        return self.forward(vision, self.embed_text(token_ids), capture_last)

    # parameters
    def named_trainable(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, name: str) -> ToyVLM:
        """Cast parameters and frozen weights in place to "f32" or "f64"."""
        dtype = {"f32": np.float32, "f64": np.float64}[name]
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for f in fields(self.frozen):
            t = getattr(self.frozen, f.name)
            t.data = t.data.astype(dtype)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.params.items():
            key = prefix + name
            if key not in arrays:
                raise CheckpointError(f"checkpoint lacks tensor {key!r}")
            if arrays[key].shape != p.shape:
                raise CheckpointError(f"tensor {key!r} has shape {arrays[key].shape}, expected {p.shape}")
            p.data = arrays[key].astype(p.dtype)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def save_model(path, model: ToyVLM, extra_header: dict | None = None) -> None:
    header = {"kind": "model", **model.cfg.to_header("model."), **(extra_header or {})}
    checkpoint.write(path, header, {"model." + k: v for k, v in model.state_arrays().items()})


def load_model(path, precision: str = "f64") -> tuple[ToyVLM, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild a model from any checkpoint holding ``model.*`` tensors."""
    header, arrays = checkpoint.read(path)
    cfg = VlmConfig.from_header(header, "model.")
    with T.precision(precision):
        model = ToyVLM(cfg)
    model.astype(precision)
    model.load_arrays(arrays, "model.")
    return model, header, arrays


def generate_greedy(model: ToyVLM, img, prompt_ids: Sequence[int], max_new: int, eos_id: int = EOS_ID) -> list[int]:
    """Argmax decoding; the end-of-sequence token is not included in the output."""
    if len(prompt_ids) == 0:
        raise SequenceTooLong("empty prompt")
    out: list[int] = []
    ids = list(prompt_ids)
    with T.no_grad():
        vision = model.project_vision(model.embed_image(img))
        while len(out) < max_new and len(ids) <= model.cfg.max_text_tokens:
            trace = model.forward(vision, model.embed_text(ids))
            nxt = int(np.argmax(trace.logits.data[-1]))
            if nxt == eos_id:
                break
            out.append(nxt)
            ids.append(nxt)
    return out
