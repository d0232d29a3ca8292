import csv
import io

import numpy as np
import pytest

import oracles
from alignkd.data import SynthSpec, synth_samples
from alignkd.errors import EmptyDataset, ZeroVector
from alignkd.probe import (
    CSV_HEADER,
    adjacent_layer_cosine,
    probe_aggregate,
    probe_trace,
    segment_cosine_per_layer,
    segment_distance_per_layer,
)
from alignkd.tensor import Tensor
from alignkd.vlm import ForwardTrace, ToyVLM, VlmConfig

pytestmark = pytest.mark.usefixtures("f64")

SMALL = VlmConfig(d_model=16, n_heads=2, n_layers=3, vocab_size=64, d_patch=16, patch_rows=8, patch_cols=8, n_vision_tokens=16, max_text_tokens=24, seed=3)


def make_trace(states, n_vision):
    hidden = [Tensor(np.asarray(s, dtype=np.float64)) for s in states]
    length = hidden[0].shape[0]
    return ForwardTrace(hidden, None, None, None, n_vision, length - n_vision)


def identity_layers(model: ToyVLM) -> ToyVLM:
    for name, p in model.params.items():
        if ".attn.out." in name or ".ff.out." in name:
            p.data[...] = 0
    return model


def test_adjacent_examples(rng):
    x = rng.normal(size=(4, 3))
    assert adjacent_layer_cosine(make_trace([x, x], 2)) == [1.0]
    assert abs(adjacent_layer_cosine(make_trace([x, -x], 2))[0] + 1.0) < 1e-12
    with pytest.raises(ZeroVector):
        adjacent_layer_cosine(make_trace([x, 0 * x], 2))


def test_segment_examples():
    trace = make_trace([np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 5.0]])], 2)
    assert abs(segment_cosine_per_layer(trace)[0]) < 1e-15
    trace = make_trace([np.array([[1.0, 3.0], [3.0, 1.0], [2.0, 2.0]])], 2)
    assert abs(segment_cosine_per_layer(trace)[0] - 1.0) < 1e-12
    assert segment_distance_per_layer(trace) == [0.0]
    trace = make_trace([np.array([[1.0, 1.0, 1.0, 1.0], [2.0, 2.0, 2.0, 2.0]])], 1)
    assert abs(segment_distance_per_layer(trace)[0] - 1.0) < 1e-15


def test_metrics_match_reference(rng):
    for _ in range(10):
        n_states, length, d = rng.integers(2, 5), rng.integers(2, 7), rng.integers(1, 6)
        n_v = int(rng.integers(1, length))
        states = [rng.normal(size=(length, d)) for _ in range(n_states)]
        report = probe_trace(make_trace(states, n_v))
        adj, sc, sd = oracles.probe_metrics([s.tolist() for s in states], n_v, length - n_v)
        np.testing.assert_allclose(report.adjacent_cos, adj, rtol=0, atol=1e-10)
        np.testing.assert_allclose(report.segment_cos, sc, rtol=0, atol=1e-10)
        np.testing.assert_allclose(report.segment_dist, sd, rtol=0, atol=1e-10)


def test_scale_invariance(rng):
    states = [rng.normal(size=(5, 4)) for _ in range(3)]
    a = probe_trace(make_trace(states, 2))
    b = probe_trace(make_trace([3.5 * s for s in states], 2))
    np.testing.assert_allclose(a.adjacent_cos, b.adjacent_cos, atol=1e-9)
    np.testing.assert_allclose(a.segment_cos, b.segment_cos, atol=1e-9)
    np.testing.assert_allclose(3.5 * np.array(a.segment_dist), b.segment_dist, rtol=1e-12)


def test_identity_layer_model_gives_unit_adjacent_cosine(rng):
    model = identity_layers(ToyVLM(SMALL).astype("f64"))
    trace = model.run(rng.normal(size=(64, 16)), [1, 5, 9, 7])
    assert all(abs(c - 1.0) <= 1e-9 for c in adjacent_layer_cosine(trace))


def test_real_model_bounds(rng):
    model = ToyVLM(SMALL).astype("f64")
    report = probe_trace(model.run(rng.normal(size=(64, 16)), [1, 5, 9, 7]))
    assert len(report.adjacent_cos) == SMALL.n_layers
    assert len(report.segment_cos) == len(report.segment_dist) == SMALL.n_layers + 1
    assert all(-1 <= c <= 1 for c in report.adjacent_cos + report.segment_cos)
    assert all(d >= 0 for d in report.segment_dist)


@pytest.fixture(scope="module")
def samples():
    return synth_samples(SynthSpec(10, seed=4))


def test_aggregate_examples(samples):
    with pytest.raises(EmptyDataset):
        probe_aggregate(ToyVLM(SMALL), [], 5)
    model = ToyVLM(SMALL).astype("f64")
    one = probe_aggregate(model, samples[:1], 5)
    s = samples[0]
    direct = probe_trace(model.run(s.image_patches, s.prompt_ids + s.response_ids))
    assert one.adjacent_cos == direct.adjacent_cos and one.sample_count == 1
    twice = probe_aggregate(model, [s, s], 5)
    np.testing.assert_allclose(twice.segment_cos, one.segment_cos, rtol=0, atol=1e-15)


def test_aggregate_mean_recomputed(samples):
    model = ToyVLM(SMALL).astype("f64")
    report = probe_aggregate(model, samples, 64)
    per = [probe_trace(model.run(s.image_patches, s.prompt_ids + s.response_ids)) for s in samples]
    assert report.sample_count == 10
    np.testing.assert_allclose(report.segment_dist, np.mean([p.segment_dist for p in per], axis=0), rtol=0, atol=1e-10)
    assert probe_aggregate(model, samples, 3).sample_count == 3


def test_csv_layout(samples):
    report = probe_aggregate(ToyVLM(SMALL).astype("f64"), samples[:2], 2)
    text = report.to_csv("abc", seed=7)
    lines = text.splitlines()
    assert lines[0] == "# sample_count=2 model_checksum=abc seed=7"
    rows = list(csv.reader(io.StringIO("\n".join(lines[1:]))))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == SMALL.n_layers + 2
    assert rows[1][1] == "" and [float(r[1]) for r in rows[2:]] == report.adjacent_cos
