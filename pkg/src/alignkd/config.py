"""Run configuration files.

The file is INI-style key/value text whose first non-blank line is
``schema=1``::

    schema=1
    [run]
    seed = 0
    output_dir = runs/demo
    [model.teacher]
    d_model = 128
    [model.student]
    d_model = 64
    [train]
    steps = 200
    [losses]
    lambda = 0.1
    [data]
    train_path = data/train.jsonl
    [probe]
    max_samples = 64

Unknown sections or keys are rejected.  Environment variables of the form
``AKD_<SECTION>__<KEY>`` override file values, with dots in the section
name written as single underscores (``AKD_MODEL_STUDENT__D_MODEL=32``).
Seeds that are not given explicitly derive from ``run.seed``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ConfigError
from .losses import LossConfig
from .train import TrainConfig
from .vlm import VlmConfig

SCHEMA_VERSION = 1


@dataclass
class DataConfig:
    train_path: str = "data/train.jsonl"
    eval_path: str = ""
    n_samples: int = 2000
    seed: int = 0
    max_prompt_tokens: int = 16
    caption: float = 1.0
    attribute: float = 1.0
    position: float = 1.0


@dataclass
class ProbeConfig:
    max_samples: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    teacher: VlmConfig = field(default_factory=lambda: VlmConfig(d_model=128, n_heads=8, n_layers=8, seed=1))
    student: VlmConfig = field(default_factory=VlmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def losses(self) -> LossConfig:
        return self.train.losses


# losses keys as written in files -> LossConfig field names
_LOSS_ALIASES = {"lambda": "lam"}
_SECTIONS = ("run", "model.teacher", "model.student", "train", "losses", "data", "probe")


def _convert(raw: str, type_name: str, where: str):
    raw = raw.strip()
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type_name}") from None


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls) if str(f.type) in ("int", "float", "bool", "str")}


def _section_values(section: str, items: Mapping[str, str], cls, aliases=None) -> dict:
    aliases = aliases or {}
    types = _field_types(cls)
    out = {}
    for key, raw in items.items():
        name = aliases.get(key, key)
        if name not in types:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        out[name] = _convert(raw, types[name], f"[{section}] {key}")
    return out


def parse_config(text: str, env: Mapping[str, str] | None = None) -> RunConfig:
    lines = text.splitlines()
    first = next((i for i, ln in enumerate(lines) if ln.strip() and not ln.strip().startswith(("#", ";"))), None)
    if first is None or lines[first].replace(" ", "") != f"schema={SCHEMA_VERSION}":
        raise ConfigError(f"config must start with 'schema={SCHEMA_VERSION}'")
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keep key case
    try:
        parser.read_string("\n".join(lines[first + 1 :]))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    sections: dict[str, dict[str, str]] = {name: {} for name in _SECTIONS}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        sections[name].update(parser[name])
    for key, value in (env if env is not None else os.environ).items():
        if not key.startswith("AKD_") or "__" not in key:
            continue
        sec, _, opt = key[4:].partition("__")
        sec = sec.lower().replace("_", ".")
        if sec not in sections:
            raise ConfigError(f"environment override {key}: unknown section [{sec}]")
        sections[sec][opt.lower()] = value
    return build_config(sections)


def build_config(sections: Mapping[str, Mapping[str, str]]) -> RunConfig:
    run = _section_values("run", sections.get("run", {}), RunConfig)
    root = run.get("seed", 0)
    teacher_kw = _section_values("model.teacher", sections.get("model.teacher", {}), VlmConfig)
    student_kw = _section_values("model.student", sections.get("model.student", {}), VlmConfig)
    train_kw = _section_values("train", sections.get("train", {}), TrainConfig)
    loss_kw = _section_values("losses", sections.get("losses", {}), LossConfig, _LOSS_ALIASES)
    data_kw = _section_values("data", sections.get("data", {}), DataConfig)
    probe_kw = _section_values("probe", sections.get("probe", {}), ProbeConfig)

    teacher_kw = {"d_model": 128, "n_heads": 8, "n_layers": 8, **teacher_kw}
    teacher_kw.setdefault("seed", root + 1)
    student_kw.setdefault("seed", root)
    train_kw.setdefault("seed", root)
    data_kw.setdefault("seed", root)
    try:
        teacher = VlmConfig(**teacher_kw)
        student = VlmConfig(**student_kw)
        losses = LossConfig(**loss_kw)
        train = TrainConfig(losses=losses, **train_kw)
        cfg = RunConfig(
            teacher=teacher, student=student, train=train, data=DataConfig(**data_kw), probe=ProbeConfig(**probe_kw), **run
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    losses = cfg.losses
    if losses.enable_v_focus and losses.k > cfg.student.n_vision_tokens:
        raise ConfigError(f"k={losses.k} exceeds n_vision_tokens={cfg.student.n_vision_tokens}")
    shared = ("vocab_size", "patch_rows", "patch_cols", "d_patch", "n_vision_tokens", "max_text_tokens", "frozen_seed")
    diff = [k for k in shared if getattr(cfg.student, k) != getattr(cfg.teacher, k)]
    if diff:
        raise ConfigError(f"teacher and student must share {', '.join(diff)}")


def load_config(path: str | os.PathLike | None, env: Mapping[str, str] | None = None) -> RunConfig:
    if path is None:
        return parse_config(f"schema={SCHEMA_VERSION}\n", env)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(encoding="utf-8"), env)
