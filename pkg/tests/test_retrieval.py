import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pmnet.embedding import EmbeddingNet
from pmnet.numcore import ShapeError
from pmnet.prototype import PrototypeMemory
from pmnet.retrieval import (
    ModeError,
    RetrievalHead,
    RetrievalModule,
    bce_loss,
    bce_with_logits,
    multi_head_retrieve,
    predict,
    predict_batch,
    relevance,
    retrieval_forward,
    retrieve,
)


def _head(rng, d=4, l=3, u=5, bias=True):
    h = RetrievalHead(rng.normal(size=(d, l)), np.zeros(l), rng.normal(size=(d, l)), np.zeros(l),
                      rng.normal(size=(d, u)), np.zeros(u))
    if bias:
        for b in (h.bq, h.bk, h.bv):
            b[...] = rng.normal(size=b.shape)
    return h


def _memory(rng, rows=3, d=4):
    return PrototypeMemory(rng.normal(size=(rows, d)), [f"s{i}" for i in range(rows)])


def _random_model(rng, f=5, d=4, s=3, h=2, l=3, u=3, k=1):
    net = EmbeddingNet.create(f, d, (6,), rng)
    for layer in net.layers:
        layer.bias[...] = rng.normal(0, 0.3, layer.bias.shape)
    mod = RetrievalModule.create(d, s, h, l, u, "standard", rng)
    for a in (mod.bq, mod.bk, mod.bv, mod.out_b):
        a[...] = rng.normal(size=a.shape)
    mem = PrototypeMemory(rng.normal(size=(s * k, d)), [f"s{i}" for i in range(s)], k)
    return net, mem, mod


def test_singleton_memory_relevance_is_one():
    rng = np.random.default_rng(0)
    mem = _memory(rng, rows=1)
    assert relevance(rng.normal(size=4), mem, _head(rng)).tolist() == [1.0]


def test_zero_projections_uniform():
    rng = np.random.default_rng(0)
    h = _head(rng, bias=False)
    h.wq[...] = 0
    h.wk[...] = 0
    mem = _memory(rng, rows=5)
    np.testing.assert_allclose(relevance(rng.normal(size=4), mem, h), np.full(5, 0.2), atol=1e-15)
    values = mem.matrix @ h.wv + h.bv
    np.testing.assert_allclose(retrieve(rng.normal(size=4), mem, h), values.mean(0), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_relevance_matches_direct_evaluation(seed):
    rng = np.random.default_rng(seed)
    h, mem, q = _head(rng), _memory(rng), rng.normal(size=4)
    ref, _ = oracles.head_relevance(q, mem.matrix.tolist(), h.wq, h.bq, h.wk, h.bk)
    # also the unshifted exp/sum form with the explicit 1/sqrt(L)
    qv = q @ h.wq + h.bq
    raw = [math.exp(float((row @ h.wk + h.bk) @ qv) / math.sqrt(3)) for row in mem.matrix]
    np.testing.assert_allclose(relevance(q, mem, h), ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(relevance(q, mem, h), np.array(raw) / sum(raw), rtol=0, atol=1e-12)


def test_singleton_retrieve_is_value_row():
    rng = np.random.default_rng(0)
    h, mem = _head(rng), _memory(rng, rows=1)
    np.testing.assert_allclose(retrieve(rng.normal(size=4), mem, h), mem.matrix[0] @ h.wv + h.bv, atol=1e-15)


@pytest.mark.parametrize("seed", range(100))
def test_retrieve_in_value_hull(seed):
    rng = np.random.default_rng(seed)
    h, mem = _head(rng), _memory(rng, rows=4)
    z = retrieve(rng.normal(size=4) * 3, mem, h)
    v = mem.matrix @ h.wv + h.bv
    assert np.all(z >= v.min(0) - 1e-12) and np.all(z <= v.max(0) + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_relevance_is_distribution(seed):
    rng = np.random.default_rng(seed)
    r = relevance(rng.normal(size=4) * 5, _memory(rng, rows=6), _head(rng))
    assert abs(r.sum() - 1) <= 1e-12 and np.all(r >= 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_key_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    h, mem, q = _head(rng), _memory(rng, rows=5), rng.normal(size=4)
    shifted = RetrievalHead(h.wq, h.bq, h.wk, h.bk + rng.normal(size=3) * 3, h.wv, h.bv)
    assert np.max(np.abs(relevance(q, mem, h) - relevance(q, mem, shifted))) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_memory_row_permutation_leaves_z_unchanged(seed):
    rng = np.random.default_rng(seed)
    _, mem, mod = _random_model(rng)
    q = rng.normal(size=4)
    perm = rng.permutation(mem.num_rows)
    mem2 = PrototypeMemory(mem.matrix[perm], mem.scene_names)
    np.testing.assert_allclose(multi_head_retrieve(q, mem2, mod), multi_head_retrieve(q, mem, mod),
                               rtol=1e-12, atol=1e-12)


def test_single_head_equals_retrieve():
    rng = np.random.default_rng(0)
    _, mem, mod = _random_model(rng, h=1)
    q = rng.normal(size=4)
    np.testing.assert_allclose(multi_head_retrieve(q, mem, mod), retrieve(q, mem, mod.heads[0]), atol=1e-14)


def test_identical_heads_repeat_output():
    rng = np.random.default_rng(0)
    h = _head(rng, l=3, u=3)
    mod = RetrievalModule.from_heads([h, h], np.zeros((6, 3)), np.zeros(3))
    mem, q = _memory(rng), rng.normal(size=4)
    z = retrieve(q, mem, h)
    np.testing.assert_allclose(multi_head_retrieve(q, mem, mod), np.concatenate([z, z]), atol=1e-14)


def test_default_dimensions():
    rng = np.random.default_rng(0)
    mod = RetrievalModule.create(64, 16, rng=rng)
    assert (mod.num_heads, mod.key_dim, mod.value_dim) == (20, 256, 256)
    assert np.all(mod.bq == 0) and np.all(mod.bk == 0) and np.all(mod.bv == 0) and np.all(mod.out_b == 0)
    mem = PrototypeMemory(rng.normal(size=(16, 64)), [str(i) for i in range(16)])
    assert multi_head_retrieve(rng.normal(size=64), mem, mod).shape == (5120,)


def test_zero_output_layer_gives_half():
    rng = np.random.default_rng(0)
    net, mem, mod = _random_model(rng)
    mod.out_w[...] = 0
    mod.out_b[...] = 0
    assert predict(rng.normal(size=5), net, mem, mod).tolist() == [0.5, 0.5, 0.5]


@pytest.mark.parametrize("seed", range(20))
def test_predict_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    k = 1 + seed % 3
    net, mem, mod = _random_model(rng, k=k)
    x = rng.normal(size=5)
    heads = [(h.wq, h.bq, h.wk, h.bk, h.wv, h.bv) for h in mod.heads]
    ref, zref = oracles.pmnet_forward(x, [(l.weights, l.bias, l.activation) for l in net.layers],
                                      mem.matrix.tolist(), heads, mod.out_w, mod.out_b)
    p = predict(x, net, mem, mod)
    assert np.all((p > 0) & (p < 1))
    assert np.max(np.abs(p - ref)) <= 1e-9
    _, zc, _ = retrieval_forward(net(x[None]), mem, mod)
    assert np.max(np.abs(zc[0] - zref)) <= 1e-9


def test_relevance_as_prediction_oracle():
    rng = np.random.default_rng(0)
    net = EmbeddingNet.create(5, 4, (6,), rng)
    mod = RetrievalModule.create(4, 3, 1, 3, 3, "relevance_as_prediction", rng)
    mod.bq[...] = rng.normal(size=mod.bq.shape)
    mem = _memory(rng)
    x = rng.normal(size=5)
    e = oracles.mlp(x, [(l.weights, l.bias, l.activation) for l in net.layers])
    _, logits = oracles.head_relevance(e, mem.matrix.tolist(), mod.wq[0], mod.bq[0], mod.wk[0], mod.bk[0])
    expected = [oracles.sigmoid_scalar(t) for t in logits]
    np.testing.assert_allclose(predict(x, net, mem, mod), expected, atol=1e-12)
    with pytest.raises(ModeError):
        multi_head_retrieve(e, mem, mod)


def test_mode_validation():
    with pytest.raises(ValueError):
        RetrievalModule.create(4, 3, 2, 3, 3, "relevance_as_prediction")
    with pytest.raises(ValueError):
        RetrievalModule.create(4, 3, 1, 3, 3, "bogus")
    rng = np.random.default_rng(0)
    mod = RetrievalModule.create(4, 2, 1, 3, 3, "relevance_as_prediction", rng)
    mem = PrototypeMemory(rng.normal(size=(4, 4)), ["a", "b"], 2)
    with pytest.raises(ModeError):
        retrieval_forward(rng.normal(size=(1, 4)), mem, mod)


def test_shape_errors():
    rng = np.random.default_rng(0)
    net, mem, mod = _random_model(rng)
    with pytest.raises(ShapeError):
        relevance(np.zeros(3), mem, mod.heads[0])
    with pytest.raises(ShapeError):
        predict(np.zeros((2, 5)), net, mem, mod)


def test_batch_equals_single():
    rng = np.random.default_rng(0)
    net, mem, mod = _random_model(rng)
    x = rng.normal(size=(7, 5))
    batch = predict_batch(x, net, mem, mod)
    for i in range(7):
        np.testing.assert_allclose(batch[i], predict(x[i], net, mem, mod), rtol=1e-13, atol=1e-15)


def test_bce_examples():
    assert bce_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]))[0] <= 1e-11
    for y in ([0, 0, 1], [1, 1, 1], [0, 1, 0]):
        assert bce_loss(np.full(3, 0.5), np.array(y, float))[0] == pytest.approx(math.log(2), abs=1e-15)
    assert bce_loss(np.array([0.9, 0.1]), np.array([1.0, 0.0]))[0] == pytest.approx(0.1053605156578263, abs=1e-15)
    with pytest.raises(ShapeError):
        bce_loss(np.ones(2) * 0.5, np.ones(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_bce_with_logits_matches_bce_loss(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 5)) * 4
    y = (rng.random((4, 5)) < 0.5).astype(float)
    fused, g = bce_with_logits(logits, y)
    p = 1 / (1 + np.exp(-logits))
    plain, gp = bce_loss(p, y)
    assert fused == pytest.approx(plain.mean(), rel=1e-12)
    # chain rule through the sigmoid
    np.testing.assert_allclose(g, gp * p * (1 - p) / 4, rtol=1e-9, atol=1e-14)
