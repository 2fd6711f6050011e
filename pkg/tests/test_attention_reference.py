import numpy as np
import pytest

from tuckerattn.attention_reference import (
    AttentionTensorPair,
    MhaWeights,
    mha_forward,
    softmax_rows,
    split_columns,
    stack_attention_tensors,
    tensor_mha_forward,
)
from tuckerattn.tensor_core import numerical_rank, relative_error

SEEDS = [0, 1, 2, 3, 4]


def loop_mha(w, x, causal=False):
    """Per-head, per-row oracle with an explicit max-shifted softmax."""
    n, d_h = x.shape[0], w.d_head
    out = np.zeros_like(x)
    for i in range(w.n_heads):
        cols = slice(i * d_h, (i + 1) * d_h)
        q, k, v = x @ w.wq[:, cols], x @ w.wk[:, cols], x @ w.wv[:, cols]
        for a in range(n):
            keys = range(a + 1) if causal else range(n)
            s = np.array([q[a] @ k[b] / np.sqrt(d_h) for b in keys])
            p = np.exp(s - s.max())
            p /= p.sum()
            row = sum(p[j] * v[b] for j, b in enumerate(keys))
            out[a] += row @ w.wo[cols, :]
    return out


def test_softmax_examples():
    assert softmax_rows(np.array([[3.7]]))[0, 0] == 1.0
    np.testing.assert_array_equal(softmax_rows(np.zeros((1, 2))), [[0.5, 0.5]])
    p = softmax_rows(np.array([[1000.0, 1000.0 + np.log(2.0)]]))
    np.testing.assert_allclose(p, [[1 / 3, 2 / 3]], atol=1e-12, rtol=0)


def test_softmax_causal_masks_future():
    p = softmax_rows(np.random.default_rng(0).standard_normal((4, 4)), causal=True)
    assert np.all(np.triu(p, 1) == 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("causal", [False, True])
def test_mha_forward_matches_loops(seed, causal):
    rng = np.random.default_rng(seed)
    w = MhaWeights.random(4, 16, rng=rng)
    x = rng.standard_normal((6, 16))
    np.testing.assert_allclose(mha_forward(w, x, causal), loop_mha(w, x, causal), atol=1e-12)


def test_mha_single_token():
    rng = np.random.default_rng(1)
    w = MhaWeights.random(4, 8, rng=rng)
    x = rng.standard_normal((1, 8))
    np.testing.assert_allclose(mha_forward(w, x), x @ w.wv @ w.wo, atol=1e-14)


def test_mha_zero_queries_is_uniform():
    rng = np.random.default_rng(2)
    w = MhaWeights.random(2, 8, rng=rng)
    w = MhaWeights(np.zeros_like(w.wq), w.wk, w.wv, w.wo, 2)
    x = rng.standard_normal((5, 8))
    expected = np.tile((x @ w.wv @ w.wo).mean(axis=0), (5, 1))
    np.testing.assert_allclose(mha_forward(w, x), expected, atol=1e-14)


@pytest.mark.parametrize("seed", SEEDS)
def test_mha_equals_tensor_form(seed):
    rng = np.random.default_rng(seed)
    w = MhaWeights.random(4, 32, rng=rng)
    x = rng.standard_normal((16, 32))
    got = tensor_mha_forward(stack_attention_tensors(w), x, w.d_head)
    assert relative_error(got, mha_forward(w, x)) <= 1e-10


def test_mha_shape_mismatch():
    w = MhaWeights.random(2, 8, rng=0)
    with pytest.raises(ValueError):
        mha_forward(w, np.zeros((3, 6)))
    with pytest.raises(ValueError):
        MhaWeights(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8)), n_heads=3)


def test_stack_zero_keys():
    w = MhaWeights.random(2, 8, rng=0)
    pair = stack_attention_tensors(MhaWeights(w.wq, np.zeros((8, 8)), w.wv, w.wo, 2))
    assert not pair.w_pre.any()


@pytest.mark.parametrize("seed", SEEDS)
def test_stack_slices_are_products(seed):
    w = MhaWeights.random(4, 16, rng=seed)
    pair = stack_attention_tensors(w)
    q, k, v = (split_columns(m, 4) for m in (w.wq, w.wk, w.wv))
    o = w.wo.reshape(4, 4, 16)
    for i in range(4):
        np.testing.assert_allclose(pair.w_pre[i], q[i] @ k[i].T, atol=1e-14)
        np.testing.assert_allclose(pair.w_post[i], (v[i] @ o[i]).T, atol=1e-14)
        assert numerical_rank(pair.w_pre[i]) <= w.d_head
        assert numerical_rank(pair.w_post[i]) <= w.d_head


def test_tensor_forward_zero_post_tensor():
    rng = np.random.default_rng(0)
    pair = AttentionTensorPair(rng.standard_normal((2, 6, 6)), np.zeros((2, 6, 6)))
    assert not tensor_mha_forward(pair, rng.standard_normal((4, 6)), 3).any()


def test_tensor_forward_single_token():
    rng = np.random.default_rng(0)
    pair = AttentionTensorPair(rng.standard_normal((3, 6, 6)), rng.standard_normal((3, 6, 6)))
    x = rng.standard_normal((1, 6))
    np.testing.assert_allclose(tensor_mha_forward(pair, x, 2), x @ pair.w_post.sum(axis=0).T, atol=1e-14)


@pytest.mark.parametrize("seed", SEEDS)
def test_tensor_forward_causal(seed):
    rng = np.random.default_rng(seed)
    w = MhaWeights.random(2, 8, rng=rng)
    x = rng.standard_normal((7, 8))
    got = tensor_mha_forward(stack_attention_tensors(w), x, w.d_head, causal=True)
    assert relative_error(got, mha_forward(w, x, causal=True)) <= 1e-10
