import numpy as np
import pytest

from tuckerattn.attention_reference import MhaWeights, mha_forward, stack_attention_tensors, tensor_mha_forward
from tuckerattn.conversion import mha_to_tucker
from tuckerattn.rope import RopeConfig
from tuckerattn.tensor_core import hosvd, matricize, numerical_rank, relative_error
from tuckerattn.tucker import (
    CachePositionError,
    KvCache,
    TuckerAttentionParams,
    decode_step,
    kv_cache_bytes,
    materialize,
    random_params,
    tucker_forward,
)

SEEDS = [0, 1, 2, 3]


def test_zero_cores_materialize_to_zero():
    p = random_params(2, 8, (2, 3, 3), rng=0)
    pair = materialize(p.replace(core_pre=np.zeros_like(p.core_pre), core_post=np.zeros_like(p.core_post)))
    assert not pair.w_pre.any() and not pair.w_post.any()


@pytest.mark.parametrize("seed", SEEDS)
def test_materialize_reproduces_hosvd_pair(seed):
    w = MhaWeights.random(2, 8, rng=seed)
    pair = stack_attention_tensors(w)
    pre, post = hosvd(pair.w_pre, (2, 8, 8)), hosvd(pair.w_post, (2, 8, 8))
    p = TuckerAttentionParams(pre.core, post.core, *pre.factors, *post.factors, scale_dim=4.0)
    got = materialize(p)
    assert relative_error(got.w_pre, pair.w_pre) <= 1e-10
    assert relative_error(got.w_post, pair.w_post) <= 1e-10


@pytest.mark.parametrize("seed", SEEDS)
def test_materialized_mode_ranks_bounded(seed):
    p = random_params(4, 16, (2, 5, 3), (3, 4, 6), rng=seed)
    pair = materialize(p)
    for mode in (1, 2, 3):
        assert numerical_rank(matricize(pair.w_pre, mode)) <= p.ranks_pre[mode - 1]
        assert numerical_rank(matricize(pair.w_post, mode)) <= p.ranks_post[mode - 1]


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shared", [False, True])
@pytest.mark.parametrize("causal", [False, True])
def test_forward_equals_materialized(seed, shared, causal):
    rng = np.random.default_rng(seed)
    p = random_params(4, 32, (2, 8, 8), shared_kv=shared, rng=rng)
    x = rng.standard_normal((12, 32))
    ref = tensor_mha_forward(materialize(p), x, p.scale_dim, causal=causal)
    assert relative_error(tucker_forward(p, x, causal=causal), ref) <= 1e-10


@pytest.mark.parametrize("seed", SEEDS)
def test_lossless_conversion_matches_mha(seed):
    rng = np.random.default_rng(seed)
    w = MhaWeights.random(4, 16, rng=rng)
    x = rng.standard_normal((9, 16))
    p = mha_to_tucker(w, (4, 16, 16))
    assert relative_error(tucker_forward(p, x), mha_forward(w, x)) <= 1e-10


def test_single_token_is_linear():
    rng = np.random.default_rng(0)
    p = random_params(2, 8, (2, 4, 4), rng=rng)
    x = rng.standard_normal((1, 8))
    np.testing.assert_allclose(tucker_forward(p, 3 * x), 3 * tucker_forward(p, x), atol=1e-13)
    np.testing.assert_allclose(tucker_forward(p, x), x @ materialize(p).w_post.sum(axis=0).T, atol=1e-13)


def test_forward_errors():
    p = random_params(2, 8, (2, 4, 3), rng=0)
    with pytest.raises(ValueError):
        tucker_forward(p, np.zeros((3, 7)))
    with pytest.raises(ValueError):
        tucker_forward(p, np.zeros((3, 8)), rope=RopeConfig(4))


@pytest.mark.parametrize("chunk", [1, 3, 5, 20])
def test_forward_streaming_path(chunk):
    rng = np.random.default_rng(1)
    p = random_params(2, 8, (2, 4, 4), rng=rng)
    x = rng.standard_normal((9, 8))
    for causal in (False, True):
        np.testing.assert_allclose(tucker_forward(p, x, causal, chunk=chunk), tucker_forward(p, x, causal),
                                   atol=1e-12)


def test_first_decode_step_equals_single_token_forward():
    rng = np.random.default_rng(0)
    p = random_params(2, 8, (2, 4, 4), rng=rng)
    x = rng.standard_normal((1, 8))
    row, cache = decode_step(p, KvCache.for_params(p), x[0], 0)
    np.testing.assert_allclose(row, tucker_forward(p, x)[0], atol=1e-14)
    assert cache.t == 1


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shared", [False, True])
@pytest.mark.parametrize("rope", [None, RopeConfig(4)])
def test_decode_matches_causal_forward(seed, shared, rope):
    rng = np.random.default_rng(seed)
    p = random_params(2, 8, (2, 4, 4), shared_kv=shared, rng=rng)
    x = rng.standard_normal((16, 8))
    full = tucker_forward(p, x, causal=True, rope=rope)
    cache = KvCache.for_params(p)
    for t in range(16):
        row, cache = decode_step(p, cache, x[t], t, rope=rope)
        assert cache.t == t + 1
        assert relative_error(row, full[t]) <= 1e-10
    expected = 16 * (4 if shared else 8)
    assert cache.stored_values() == expected


def test_decode_position_mismatch():
    p = random_params(2, 8, (2, 4, 4), rng=0)
    with pytest.raises(CachePositionError):
        decode_step(p, KvCache.for_params(p), np.zeros(8), 3)


def test_kv_cache_bytes():
    sep = random_params(12, 768, (8, 128, 64), rng=0)
    shared = random_params(12, 768, (8, 128, 128), shared_kv=True, rng=0)
    # 12 layers, bf16, N = 1024: both caches hold 64 + 64 or 128 values per token
    assert 12 * kv_cache_bytes(sep, 1024, 2) == 3_145_728
    assert 12 * kv_cache_bytes(shared, 1024, 2) == 3_145_728
    assert kv_cache_bytes(sep, 0, 2) == 0
    small_shared = random_params(2, 8, (2, 4, 4), shared_kv=True, rng=0)
    small_sep = random_params(2, 8, (2, 4, 4), rng=0)
    assert kv_cache_bytes(small_sep, 10, 4) == 2 * kv_cache_bytes(small_shared, 10, 4)


def test_params_validation():
    p = random_params(2, 8, (2, 4, 4), rng=0)
    with pytest.raises(ValueError):
        p.replace(u2=np.zeros((7, 4)))
    with pytest.raises(ValueError):
        random_params(2, 8, (2, 4, 4), (2, 4, 3), shared_kv=True)
