"""Layer-role probes over a forward trace.

* cosine similarity between consecutive hidden states (flattened);
* per-layer cosine similarity between the mean-pooled vision segment and
  the mean-pooled text segment;
* per-layer Euclidean distance between those pooled segments, divided by
  sqrt(d_model) so models of different width are comparable.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import EmptyDataset, ZeroVector
from .vlm import ForwardTrace, ToyVLM

CSV_HEADER = ("layer_index", "adjacent_cos", "segment_cos", "segment_dist")


@dataclass
class ProbeReport:
    adjacent_cos: list[float]
    segment_cos: list[float]
    segment_dist: list[float]
    sample_count: int = 1

    def to_csv(self, checksum: str = "", seed: int | None = None) -> str:
        """One row per hidden state; transition ``i`` is reported on row ``i + 1``."""
        buf = io.StringIO()
        meta = f"# sample_count={self.sample_count} model_checksum={checksum}"
        if seed is not None:
            meta += f" seed={seed}"
        buf.write(meta + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i, (sc, sd) in enumerate(zip(self.segment_cos, self.segment_dist)):
            adj = "" if i == 0 else repr(self.adjacent_cos[i - 1])
            w.writerow([i, adj, repr(sc), repr(sd)])
        return buf.getvalue()


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _states(trace: ForwardTrace) -> list[np.ndarray]:
    states = [np.asarray(h.data, dtype=np.float64) for h in trace.hidden]
    if states and states[0].ndim != 2:
        raise ValueError("probes expect an unbatched trace ([L, d] hidden states)")
    return states


def adjacent_layer_cosine(trace: ForwardTrace) -> list[float]:
    states = _states(trace)
    if len(states) < 2:
        raise ValueError("need at least two hidden states")
    return [_cosine(a.ravel(), b.ravel()) for a, b in zip(states, states[1:])]


def _segment_pools(trace: ForwardTrace) -> list[tuple[np.ndarray, np.ndarray]]:
    n_v = trace.n_vision
    if n_v < 1 or trace.n_text < 1:
        raise ValueError("trace needs at least one vision and one text token")
    return [(h[:n_v].mean(axis=0), h[n_v : n_v + trace.n_text].mean(axis=0)) for h in _states(trace)]


def segment_cosine_per_layer(trace: ForwardTrace) -> list[float]:
    return [_cosine(v, t) for v, t in _segment_pools(trace)]


def segment_distance_per_layer(trace: ForwardTrace) -> list[float]:
    return [float(np.linalg.norm(v - t) / np.sqrt(v.size)) for v, t in _segment_pools(trace)]


def probe_trace(trace: ForwardTrace) -> ProbeReport:
    return ProbeReport(
        adjacent_layer_cosine(trace), segment_cosine_per_layer(trace), segment_distance_per_layer(trace), 1
    )


def probe_aggregate(model: ToyVLM, dataset: Sequence, max_samples: int) -> ProbeReport:
    """Mean of per-sample probe metrics over the first ``max_samples`` samples."""
    samples = list(dataset)[: max(0, max_samples)]
    if not samples:
        raise EmptyDataset("probe needs at least one sample")
    reports = []
    with T.no_grad():
        for s in samples:
            ids = list(s.prompt_ids) + list(s.response_ids)
            reports.append(probe_trace(model.run(s.image_patches, ids)))
    n = len(reports)

    def mean(attr: str) -> list[float]:
        return [float(x) for x in np.mean([getattr(r, attr) for r in reports], axis=0)]

    return ProbeReport(mean("adjacent_cos"), mean("segment_cos"), mean("segment_dist"), n)


def write_report(path, report: ProbeReport, checksum: str = "", seed: int | None = None) -> None:
    Path(path).write_text(report.to_csv(checksum, seed), encoding="utf-8")
