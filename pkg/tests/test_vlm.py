import math

import numpy as np
import pytest

from alignkd import checkpoint
from alignkd import tensor as T
from alignkd.errors import CheckpointError, IndivisibleGrouping, InvalidTokenId, SequenceTooLong, ShapeMismatch
from alignkd.tensor import Tensor
from alignkd.vlm import (
    FrozenWeights,
    ToyImage,
    ToyVLM,
    VlmConfig,
    embed_image,
    embed_text,
    generate_greedy,
    load_model,
    make_frozen,
    project_vision,
    save_model,
)

pytestmark = pytest.mark.usefixtures("f64")

TINY = VlmConfig(
    d_model=8, n_heads=2, n_layers=2, vocab_size=12, patch_rows=2, patch_cols=2, d_patch=4,
    n_vision_tokens=2, max_text_tokens=8, seed=5,
)


def tiny_model(cfg=TINY):
    return ToyVLM(cfg).astype("f64")


def perturb(model, rng, scale=0.3):
    """Give every parameter (biases and gains included) a nonzero random offset."""
    for p in model.params.values():
        p.data = p.data + scale * rng.normal(size=p.shape)


# -- config --------------------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ValueError):
        VlmConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        VlmConfig(n_layers=1)
    with pytest.raises(IndivisibleGrouping):
        VlmConfig(n_vision_tokens=7)


def test_config_header_roundtrip():
    assert VlmConfig.from_header(TINY.to_header("m."), "m.") == TINY


# -- embedding pathways --------------------------------------------------------


def test_embed_image_zero_and_identity():
    zero = FrozenWeights(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))), Tensor(np.zeros((12, 8))), Tensor(np.zeros((8, 8))))
    assert np.all(embed_image(np.zeros((4, 4)), TINY, zero).data == 0)
    pos = np.arange(16.0).reshape(4, 4)
    ident = FrozenWeights(Tensor(np.eye(4)), Tensor(pos), zero.text_table, zero.text_pos)
    x = np.random.default_rng(0).normal(size=(4, 4))
    np.testing.assert_array_equal(embed_image(ToyImage(x), TINY, ident).data, x + pos)


def test_embed_image_deterministic_and_frozen():
    x = np.random.default_rng(0).normal(size=(4, 4))
    a = embed_image(x, TINY, make_frozen(TINY))
    b = embed_image(x, TINY, make_frozen(TINY))
    assert a.data.tobytes() == b.data.tobytes()
    assert not a.requires_grad
    with pytest.raises(ShapeMismatch):
        embed_image(np.zeros((3, 4)), TINY, make_frozen(TINY))


def test_project_vision_constant_patches():
    params = {"vision.weight": Tensor(np.eye(4, 8)), "vision.bias": Tensor(np.zeros(8))}
    v = np.array([1.0, -2.0, 3.0, 0.5])
    out = project_vision(Tensor(np.tile(v, (4, 1))), TINY, params).data
    for row in out:
        np.testing.assert_array_equal(row, v @ np.eye(4, 8))


def test_project_vision_identity_pooling(rng):
    cfg = VlmConfig(d_model=8, n_heads=2, n_layers=2, patch_rows=2, patch_cols=2, d_patch=4, n_vision_tokens=4)
    w, b = rng.normal(size=(4, 8)), rng.normal(size=8)
    x = rng.normal(size=(4, 4))
    out = project_vision(Tensor(x), cfg, {"vision.weight": Tensor(w), "vision.bias": Tensor(b)})
    np.testing.assert_allclose(out.data, x @ w + b, rtol=0, atol=1e-14)


def test_project_vision_loop_oracle(rng):
    cfg = VlmConfig(d_model=6, n_heads=2, n_layers=2, patch_rows=4, patch_cols=3, d_patch=5, n_vision_tokens=4)
    for _ in range(10):
        x, w, b = rng.normal(size=(12, 5)), rng.normal(size=(5, 6)), rng.normal(size=6)
        out = project_vision(Tensor(x), cfg, {"vision.weight": Tensor(w), "vision.bias": Tensor(b)}).data
        group = 3
        for n in range(4):
            pooled = [sum(x[n * group + g, c] for g in range(group)) / group for c in range(5)]
            for j in range(6):
                ref = b[j] + sum(pooled[c] * w[c, j] for c in range(5))
                assert abs(out[n, j] - ref) <= 1e-12


def test_project_vision_gradients_flow(rng):
    model = tiny_model()
    model.project_vision(model.embed_image(rng.normal(size=(4, 4)))).sum().backward()
    assert np.any(model.params["vision.weight"].grad != 0)
    with pytest.raises(IndivisibleGrouping):
        project_vision(Tensor(np.zeros((3, 4))), TINY, model.params)


def test_embed_text_lookup_and_errors():
    frozen = make_frozen(TINY)
    ids = [3, 3, 7, 0]
    out = embed_text(ids, TINY, frozen).data
    np.testing.assert_array_equal(out, frozen.text_table.data[ids] + frozen.text_pos.data[:4])
    np.testing.assert_array_equal(out[0] - frozen.text_pos.data[0], out[1] - frozen.text_pos.data[1])
    with pytest.raises(SequenceTooLong):
        embed_text([], TINY, frozen)
    with pytest.raises(SequenceTooLong):
        embed_text([1] * 9, TINY, frozen)
    with pytest.raises(InvalidTokenId):
        embed_text([12], TINY, frozen)


# -- forward -------------------------------------------------------------------


def _ln(v, g, b, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + eps) * gi + bi for x, gi, bi in zip(v, g, b)]


def _affine(v, w, b):
    return [b[j] + sum(v[i] * w[i][j] for i in range(len(v))) for j in range(len(b))]


def _gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def reference_forward(x0, params, cfg, table):
    """Straight-line per-token, per-head evaluation of the decoder."""
    p = {k: v.data.tolist() for k, v in params.items()}
    h, dh, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    x = [list(row) for row in x0]
    length = len(x)
    hidden, attn_first = [x], None
    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}."
        normed = [_ln(row, p[pre + "ln1.gain"], p[pre + "ln1.bias"]) for row in x]
        qkv = [_affine(row, p[pre + "attn.qkv.weight"], p[pre + "attn.qkv.bias"]) for row in normed]
        attn = [[[0.0] * length for _ in range(length)] for _ in range(h)]
        ctx = [[0.0] * d for _ in range(length)]
        for head in range(h):
            def q(i): return qkv[i][head * dh:(head + 1) * dh]
            def k(i): return qkv[i][d + head * dh:d + (head + 1) * dh]
            def v(i): return qkv[i][2 * d + head * dh:2 * d + (head + 1) * dh]
            for i in range(length):
                scores = [sum(a * b for a, b in zip(q(i), k(j))) / math.sqrt(dh) for j in range(i + 1)]
                m = max(scores)
                e = [math.exp(s - m) for s in scores]
                z = sum(e)
                for j in range(i + 1):
                    attn[head][i][j] = e[j] / z
                for c in range(dh):
                    ctx[i][head * dh + c] = sum(attn[head][i][j] * v(j)[c] for j in range(i + 1))
        out = [_affine(row, p[pre + "attn.out.weight"], p[pre + "attn.out.bias"]) for row in ctx]
        x = [[a + b for a, b in zip(r, o)] for r, o in zip(x, out)]
        mid = [_ln(row, p[pre + "ln2.gain"], p[pre + "ln2.bias"]) for row in x]
        mid = [[_gelu(u) for u in _affine(row, p[pre + "ff.in.weight"], p[pre + "ff.in.bias"])] for row in mid]
        ff = [_affine(row, p[pre + "ff.out.weight"], p[pre + "ff.out.bias"]) for row in mid]
        x = [[a + b for a, b in zip(r, o)] for r, o in zip(x, ff)]
        hidden.append(x)
        if layer == 0:
            attn_first = attn
    final = [_ln(row, p["final_ln.gain"], p["final_ln.bias"]) for row in x]
    logits = [[p["head.bias"][t] + sum(row[c] * table[t][c] for c in range(d)) for t in range(len(table))] for row in final]
    return hidden, attn_first, logits


def test_forward_matches_reference(rng):
    model = tiny_model()
    perturb(model, rng)
    img = rng.normal(size=(4, 4))
    ids = [1, 5, 9, 2]  # L = 2 vision + 4 text = 6
    trace = model.run(img, ids)
    x0 = trace.hidden[0].data.tolist()
    hidden, attn, logits = reference_forward(x0, model.params, TINY, model.frozen.text_table.data.tolist())
    for got, ref in zip(trace.hidden, hidden):
        np.testing.assert_allclose(got.data, ref, rtol=0, atol=1e-10)
    np.testing.assert_allclose(trace.attn_first.data, attn, rtol=0, atol=1e-10)
    np.testing.assert_allclose(trace.logits.data, logits, rtol=0, atol=1e-10)


def test_trace_structure(rng):
    model = tiny_model()
    img, ids = rng.normal(size=(4, 4)), [1, 4, 6]
    trace = model.run(img, ids, capture_last=True)
    assert len(trace.hidden) == TINY.n_layers + 1
    assert trace.attn_first.shape == (TINY.n_heads, 5, 5)
    assert trace.attn_last.shape == (TINY.n_heads, 5, 5)
    assert (trace.n_vision, trace.n_text) == (2, 3)
    expected = np.concatenate([model.project_vision(model.embed_image(img)).data, model.embed_text(ids).data])
    assert np.array_equal(trace.hidden[0].data, expected)
    assert model.run(img, ids).attn_last is None


def test_single_token_attention_row():
    model = tiny_model()
    text = model.embed_text([4])
    trace = model.forward(Tensor(np.zeros((0, TINY.d_model))), text)
    assert trace.attn_first.data.shape == (TINY.n_heads, 1, 1)
    assert np.all(trace.attn_first.data == 1.0)


def test_causal_mask_exact(rng):
    model = tiny_model(VlmConfig(d_model=16, n_heads=4, n_layers=3, vocab_size=12, patch_rows=2, patch_cols=2, d_patch=4, n_vision_tokens=4))
    trace = model.run(rng.normal(size=(4, 4)), [1, 3, 5, 7, 2], capture_last=True)
    for attn in (trace.attn_first.data, trace.attn_last.data):
        upper = np.triu(np.ones(attn.shape[-2:], dtype=bool), k=1)
        assert np.all(attn[:, upper] == 0.0)
        assert np.all(np.abs(attn.sum(axis=-1) - 1) <= 1e-6)


def test_perturbing_a_text_token_leaves_earlier_logits(rng):
    model = tiny_model()
    perturb(model, rng)
    img = rng.normal(size=(4, 4))
    ids = [1, 4, 6, 8, 3]
    base = model.run(img, ids).logits.data
    for j in range(len(ids)):
        changed = list(ids)
        changed[j] = (changed[j] + 5) % TINY.vocab_size
        out = model.run(img, changed).logits.data
        pos = TINY.n_vision_tokens + j
        assert np.array_equal(out[:pos], base[:pos])
        assert not np.array_equal(out[pos:], base[pos:])


def test_batched_forward_matches_unbatched(rng):
    model = tiny_model()
    imgs = rng.normal(size=(3, 4, 4))
    ids = rng.integers(0, 12, size=(3, 5))
    batched = model.run(imgs, ids)
    for i in range(3):
        single = model.run(imgs[i], ids[i])
        np.testing.assert_allclose(batched.logits.data[i], single.logits.data, atol=1e-12)


def test_forward_shape_errors():
    model = tiny_model()
    with pytest.raises(ShapeMismatch):
        model.forward(Tensor(np.zeros((2, 7))), Tensor(np.zeros((3, 8))))


def test_frozen_weights_get_no_gradient(rng):
    model = tiny_model()
    trace = model.run(rng.normal(size=(4, 4)), [1, 2, 3])
    trace.logits.sum().backward()
    for t in (model.frozen.patch_weight, model.frozen.text_table):
        assert t.grad is None and not t.requires_grad
    assert all(p.grad is not None for p in model.params.values())


def test_teacher_and_student_token_counts_agree(rng):
    student = tiny_model()
    teacher = tiny_model(VlmConfig(d_model=16, n_heads=4, n_layers=3, vocab_size=12, patch_rows=2, patch_cols=2, d_patch=4, n_vision_tokens=2, max_text_tokens=8))
    img, ids = rng.normal(size=(4, 4)), [1, 2, 3]
    s, t = student.run(img, ids), teacher.run(img, ids)
    assert (s.n_vision, s.n_text) == (t.n_vision, t.n_text)


# -- generation ------------------------------------------------------------------


def test_generate_zero_and_constant_head(rng):
    model = tiny_model()
    img = rng.normal(size=(4, 4))
    assert generate_greedy(model, img, [1, 4], max_new=0) == []
    model.params["head.bias"].data[:] = 0
    model.params["head.bias"].data[3] = 1e6
    assert generate_greedy(model, img, [1, 4], max_new=4) == [3, 3, 3, 3]
    with pytest.raises(SequenceTooLong):
        generate_greedy(model, img, [], max_new=2)


def test_generate_stops_at_eos(rng):
    model = tiny_model()
    model.params["head.bias"].data[:] = 0
    model.params["head.bias"].data[2] = 1e6
    assert generate_greedy(model, rng.normal(size=(4, 4)), [1], max_new=5) == []


def test_generate_respects_text_cap(rng):
    model = tiny_model()
    model.params["head.bias"].data[:] = 0
    model.params["head.bias"].data[5] = 1e6
    out = generate_greedy(model, rng.normal(size=(4, 4)), [1, 4, 4], max_new=50)
    assert len(out) == TINY.max_text_tokens - 3 + 1


# -- checkpoints ---------------------------------------------------------------


def test_model_checkpoint_roundtrip(tmp_path, rng):
    model = tiny_model()
    perturb(model, rng)
    path = tmp_path / "m.akd"
    save_model(path, model)
    loaded, header, _ = load_model(path)
    assert loaded.cfg == TINY and header["kind"] == "model"
    for name, p in model.params.items():
        assert np.array_equal(loaded.params[name].data, p.data.astype(np.float32).astype(np.float64))
    assert loaded.checksum() == model.checksum()


def test_checkpoint_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = checkpoint.encode({"a": "1"}, {"w": arr})
    assert blob[:4] == b"AKD1"
    hlen = int.from_bytes(blob[4:12], "little")
    assert blob[12 : 12 + hlen] == b"a=1\n"
    header, tensors = checkpoint.decode(blob)
    assert header == {"a": "1"} and np.array_equal(tensors["w"], arr)
    with pytest.raises(CheckpointError):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:-2])
