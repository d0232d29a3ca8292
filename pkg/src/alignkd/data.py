"""Synthetic colored-shape scenes, the JSONL dataset format, and batching.

A scene places 2-3 objects in distinct cells of a 16-cell layout.  Each cell
covers four consecutive patches of the 8x8 patch grid (one half row), which
is exactly the pooling group of one vision token.  Object patches carry a
one-hot color code, a one-hot shape code and noise.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import EmptyDataset, InvalidTokenId, ParseError
from .vlm import BOS_ID, EOS_ID, PAD_ID, ToyImage

log = logging.getLogger(__name__)

SCHEMA = "akd-dataset"
SCHEMA_VERSION = 1

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle", "star")
WORDS = (
    ("<pad>", "<bos>", "<eos>")
    + COLORS
    + SHAPES
    + ("please", "describe", "the", "image", "what", "color", "is", "where", "?", "and", "row", "left", "right")
    + tuple(str(i) for i in range(8))
)
VOCAB = {w: i for i, w in enumerate(WORDS)}
assert VOCAB["<pad>"] == PAD_ID and VOCAB["<bos>"] == BOS_ID and VOCAB["<eos>"] == EOS_ID

PATCH_ROWS = PATCH_COLS = 8
D_PATCH = 16
CELL_PATCHES = 4
N_CELLS = PATCH_ROWS * PATCH_COLS // CELL_PATCHES
TASKS = ("caption", "attribute", "position")
MAX_POLITE = 6


def encode(words: Sequence[str]) -> list[int]:
    return [VOCAB[w] for w in words]


def decode(ids: Sequence[int]) -> list[str]:
    return [WORDS[i] if 0 <= i < len(WORDS) else f"<{i}>" for i in ids]


@dataclass
class SynthSpec:
    n_samples: int
    seed: int = 0
    max_prompt_tokens: int = 16
    caption: float = 1.0
    attribute: float = 1.0
    position: float = 1.0

    def __post_init__(self):
        w = self.weights
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("task weights must be nonnegative with positive sum")

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.caption, self.attribute, self.position], dtype=float)


@dataclass
class Sample:
    image_patches: np.ndarray  # [64, 16]
    prompt_ids: list[int]
    response_ids: list[int]

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_patches": self.image_patches.tolist(),
                "prompt_ids": self.prompt_ids,
                "response_ids": self.response_ids,
            },
            separators=(",", ":"),
        )

    def key(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:24]


@dataclass
class Scene:
    objects: dict[int, tuple[int, int]]  # cell -> (color, shape)


# -- rendering -------------------------------------------------------------------


def render(scene: Scene, rng: np.random.Generator) -> np.ndarray:
    patches = rng.normal(0.0, 0.1, (PATCH_ROWS * PATCH_COLS, D_PATCH))
    for cell, (color, shape) in scene.objects.items():
        rows = slice(cell * CELL_PATCHES, (cell + 1) * CELL_PATCHES)
        patches[rows, color] += 1.0
        patches[rows, len(COLORS) + shape] += 1.0
    return np.round(patches, 4)


def read_scene(patches: np.ndarray) -> Scene:
    """Recover the object layout from patch features."""
    cells = np.asarray(patches).reshape(N_CELLS, CELL_PATCHES, D_PATCH).mean(axis=1)
    objects = {}
    for cell, feat in enumerate(cells):
        color_code, shape_code = feat[: len(COLORS)], feat[len(COLORS) : len(COLORS) + len(SHAPES)]
        if color_code.max() > 0.5 and shape_code.max() > 0.5:
            objects[cell] = (int(color_code.argmax()), int(shape_code.argmax()))
    return Scene(objects)


def cell_position(cell: int) -> list[str]:
    return ["row", str(cell // 2), "left" if cell % 2 == 0 else "right"]


def question_answer(scene: Scene, task: str, target: int, n_polite: int) -> tuple[list[str], list[str]]:
    """Prompt and answer words for ``task`` about the object in cell ``target``."""
    polite = ["please"] * n_polite
    if task == "caption":
        answer: list[str] = []
        for cell in sorted(scene.objects):
            color, shape = scene.objects[cell]
            answer += (["and"] if answer else []) + [COLORS[color], SHAPES[shape]]
        return ["<bos>", *polite, "describe", "the", "image"], answer
    color, shape = scene.objects[target]
    if task == "attribute":
        return ["<bos>", *polite, "what", "color", "is", "the", SHAPES[shape], "?"], [COLORS[color]]
    if task == "position":
        return ["<bos>", *polite, "where", "is", "the", COLORS[color], SHAPES[shape], "?"], cell_position(target)
    raise ValueError(f"unknown task {task!r}")


def answer_from_image(patches: np.ndarray, prompt_ids: Sequence[int]) -> list[int]:
    """Answer a prompt by reading the scene back out of the pixels."""
    scene = read_scene(patches)
    words = [w for w in decode(prompt_ids) if w not in ("<bos>", "please")]
    if words[0] == "describe":
        task, target = "caption", -1
    elif words[0] == "what":
        task = "attribute"
        shape = SHAPES.index(words[4])
        target = next(c for c, (_, s) in scene.objects.items() if s == shape)
    else:
        task = "position"
        color, shape = COLORS.index(words[3]), SHAPES.index(words[4])
        target = next(c for c, o in scene.objects.items() if o == (color, shape))
    _, answer = question_answer(scene, task, target, 0)
    return encode(answer) + [EOS_ID]


# -- generation ------------------------------------------------------------------


def synth_samples(spec: SynthSpec) -> list[Sample]:
    rng = np.random.default_rng(spec.seed)
    probs = spec.weights / spec.weights.sum()
    out = []
    for _ in range(spec.n_samples):
        n_obj = int(rng.integers(2, 4))
        cells = rng.choice(N_CELLS, size=n_obj, replace=False)
        shapes = rng.choice(len(SHAPES), size=n_obj, replace=False)
        colors = rng.integers(0, len(COLORS), size=n_obj)
        scene = Scene({int(c): (int(col), int(s)) for c, col, s in zip(cells, colors, shapes)})
        task = TASKS[int(rng.choice(len(TASKS), p=probs))]
        target = int(cells[int(rng.integers(0, n_obj))])
        n_polite = int(rng.integers(0, MAX_POLITE + 1))
        prompt, answer = question_answer(scene, task, target, n_polite)
        patches = render(scene, rng)
        if len(prompt) > spec.max_prompt_tokens:
            continue  # overlong prompts are dropped, never truncated
        out.append(Sample(patches, encode(prompt), encode(answer) + [EOS_ID]))
    if not out:
        log.warning("synthetic dataset is empty: every prompt exceeded max_prompt_tokens=%d", spec.max_prompt_tokens)
    return out


def synth_generate(spec: SynthSpec, path: str | os.PathLike) -> Path:
    """Write a deterministic synthetic dataset file; returns its path."""
    if spec.n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    samples = synth_samples(spec)
    header = {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "seed": spec.seed,
        "n_samples": len(samples),
        "max_prompt_tokens": spec.max_prompt_tokens,
    }
    write_dataset(path, samples, header)
    return Path(path)


def write_dataset(path, samples: Sequence[Sample], header: dict | None = None) -> None:
    path = Path(path)
    header = {"schema": SCHEMA, "version": SCHEMA_VERSION, **(header or {})}
    lines = [json.dumps(header, separators=(",", ":"))] + [s.to_json() for s in samples]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def self_check(samples: Sequence[Sample]) -> int:
    """Number of samples whose label disagrees with the image re-read."""
    return sum(answer_from_image(s.image_patches, s.prompt_ids) != s.response_ids for s in samples)


# -- reading and batching ----------------------------------------------------------


def read_dataset(path, vocab_size: int | None = None) -> list[Sample]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise EmptyDataset(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc.msg}", 1) from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA or header.get("version") != SCHEMA_VERSION:
        raise ParseError(f"expected schema {SCHEMA} version {SCHEMA_VERSION}", 1)
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            patches = np.asarray(rec["image_patches"], dtype=np.float64)
            prompt = [int(i) for i in rec["prompt_ids"]]
            response = [int(i) for i in rec["response_ids"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad record: {exc}", lineno) from None
        if patches.ndim != 2:
            raise ParseError("image_patches must be a 2-D array", lineno)
        if not prompt or not response:
            raise ParseError("prompt_ids and response_ids must be non-empty", lineno)
        if vocab_size is not None and any(not 0 <= i < vocab_size for i in prompt + response):
            raise InvalidTokenId(f"line {lineno}: token id outside [0, {vocab_size})")
        samples.append(Sample(patches, prompt, response))
    if not samples:
        raise EmptyDataset(f"{path} holds no samples")
    return samples


@dataclass
class DistillBatch:
    images: list[ToyImage]
    prompt_ids: list[list[int]]
    response_ids: list[list[int]]
    loss_mask: list[list[bool]] = field(default_factory=list)
    keys: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.loss_mask:
            self.loss_mask = [[False] * len(p) + [True] * len(r) for p, r in zip(self.prompt_ids, self.response_ids)]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def text_lengths(self) -> list[int]:
        return [len(p) + len(r) for p, r in zip(self.prompt_ids, self.response_ids)]

    def patches(self) -> np.ndarray:
        return np.stack([im.patch_features for im in self.images])

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Padded text ids, next-token targets and target mask, each ``[B, T]``.

        Position ``i`` predicts token ``i + 1``; the target mask is true where
        that next token belongs to the response.
        """
        width = max(self.text_lengths)
        ids = np.full((len(self), width), PAD_ID, dtype=np.int64)
        targets = np.full((len(self), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(self), width), dtype=bool)
        for b, (p, r, lm) in enumerate(zip(self.prompt_ids, self.response_ids, self.loss_mask)):
            seq = p + r
            ids[b, : len(seq)] = seq
            targets[b, : len(seq) - 1] = seq[1:]
            mask[b, : len(seq) - 1] = lm[1:]
        return ids, targets, mask

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> DistillBatch:
        return cls(
            images=[ToyImage(s.image_patches) for s in samples],
            prompt_ids=[list(s.prompt_ids) for s in samples],
            response_ids=[list(s.response_ids) for s in samples],
            keys=[s.key() for s in samples],
        )


class BatchLoader:
    """Shuffled fixed-size batches; the order of samples does not depend on batch size."""

    def __init__(self, samples: Sequence[Sample], batch_size: int, seed: int = 0, shuffle: bool = True):
        if not samples:
            raise EmptyDataset("no samples to batch")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.samples = list(samples)
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle

    def order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.samples))
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.samples))

    def epoch(self, epoch: int = 0) -> Iterator[DistillBatch]:
        idx = self.order(epoch)
        for start in range(0, len(idx), self.batch_size):
            yield DistillBatch.from_samples([self.samples[i] for i in idx[start : start + self.batch_size]])

    def __iter__(self) -> Iterator[DistillBatch]:
        return self.epoch(0)

    def stream(self) -> Iterator[DistillBatch]:
        """Endless full batches; the sample stream is the concatenation of shuffled epochs."""
        epoch, buf = 0, []
        while True:
            for i in self.order(epoch):
                buf.append(self.samples[i])
                if len(buf) == self.batch_size:
                    yield DistillBatch.from_samples(buf)
                    buf = []
            epoch += 1


def load_dataset(path, batch_size: int = 8, seed: int = 0, vocab_size: int | None = None, shuffle: bool = True):
    return BatchLoader(read_dataset(path, vocab_size), batch_size, seed, shuffle)
