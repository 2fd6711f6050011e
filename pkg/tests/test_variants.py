import numpy as np
import pytest

from tuckerattn.attention_reference import MhaWeights, mha_forward, stack_attention_tensors, tensor_mha_forward
from tuckerattn.rope import RopeConfig
from tuckerattn.tensor_core import matricize, multi_mode_product, numerical_rank, relative_error
from tuckerattn.variants import (
    GqaWeights,
    MlaWeights,
    canonical_core,
    default_decoupled_width,
    gqa_forward,
    gqa_lift,
    head_permutation,
    mla_forward_fused,
    mla_forward_unfused,
    mla_fuse,
    mla_lift,
    stacked_head_unfolding,
    theoretical_ranks,
)

SEEDS = [0, 1, 2, 3]


def mode_ranks(t):
    return tuple(numerical_rank(matricize(t, m), 1e-8) for m in (1, 2, 3))


def test_gqa_full_groups_is_mha():
    rng = np.random.default_rng(0)
    g = GqaWeights.random(4, 4, 16, rng=rng)
    x = rng.standard_normal((6, 16))
    np.testing.assert_allclose(gqa_forward(g, x), mha_forward(g.as_mha(), x), atol=1e-14)


def test_mqa_heads_share_one_block():
    g = GqaWeights.random(4, 1, 16, rng=1)
    _, k, v, _ = g.head_blocks()
    for i in range(4):
        np.testing.assert_array_equal(k[i], g.wk_groups[0])
        np.testing.assert_array_equal(v[i], g.wv_groups[0])


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("causal", [False, True])
def test_gqa_matches_duplicated_mha(seed, causal):
    rng = np.random.default_rng(seed)
    g = GqaWeights.random(4, 2, 16, rng=rng)
    x = rng.standard_normal((7, 16))
    k_dup = np.concatenate([g.wk_groups[i // 2] for i in range(4)], axis=1)
    v_dup = np.concatenate([g.wv_groups[i // 2] for i in range(4)], axis=1)
    mha = MhaWeights(g.wq, k_dup, v_dup, g.wo, 4)
    np.testing.assert_allclose(gqa_forward(g, x, causal), mha_forward(mha, x, causal), atol=1e-12)


def test_gqa_shape_errors():
    with pytest.raises(ValueError):
        GqaWeights.random(4, 3, 16)
    with pytest.raises(ValueError):
        gqa_forward(GqaWeights.random(4, 2, 16), np.zeros((3, 8)))


def _orthogonal(rng, d):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q


@pytest.mark.parametrize("seed", SEEDS)
def test_mla_full_latent_reproduces_mha(seed):
    rng = np.random.default_rng(seed)
    w = MhaWeights.random(4, 16, rng=rng)
    dq, dk = _orthogonal(rng, 16), _orthogonal(rng, 16)
    split = lambda m: m.reshape(16, 4, 4).transpose(1, 0, 2)  # noqa: E731
    mla = MlaWeights(w_dq=dq, w_uq=split(dq.T @ w.wq), w_dkv=dk, w_uk=split(dk.T @ w.wk),
                     w_uv=split(dk.T @ w.wv), wo=w.wo)
    x = rng.standard_normal((5, 16))
    assert relative_error(mla_forward_unfused(mla, x), mha_forward(w, x)) <= 1e-10


def test_mla_zero_value_up_gives_zero():
    w = MlaWeights.random(2, 8, 4, 4, rng=0)
    w.w_uv = np.zeros_like(w.w_uv)
    assert not mla_forward_unfused(w, np.random.default_rng(0).standard_normal((3, 8))).any()


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shared", [True, False])
def test_mla_equals_lifted_tensor_forward(seed, shared):
    rng = np.random.default_rng(seed)
    w = MlaWeights.random(4, 16, 6, 4, shared_kv=shared, rng=rng)
    x = rng.standard_normal((8, 16))
    got = tensor_mha_forward(mla_lift(w), x, w.d_head)
    assert relative_error(got, mla_forward_unfused(w, x)) <= 1e-10


@pytest.mark.parametrize("seed", SEEDS)
def test_mla_decoupled_adds_rotational_scores(seed):
    rng = np.random.default_rng(seed)
    w = MlaWeights.random(2, 8, 4, 4, rope_dim=2, rng=rng)
    x = rng.standard_normal((5, 8))
    zero_rot = MlaWeights(w.w_dq, w.w_uq, w.w_dkv, w.w_uk, w.w_uv, w.wo,
                          wq_rot=np.zeros_like(w.wq_rot), wk_rot=np.zeros_like(w.wk_rot))
    np.testing.assert_allclose(mla_forward_unfused(zero_rot, x, "decoupled"), mla_forward_unfused(w, x), atol=1e-14)
    assert not np.allclose(mla_forward_unfused(w, x, "decoupled"), mla_forward_unfused(w, x))


def test_decoupled_default_width():
    assert default_decoupled_width(64) == 32
    assert default_decoupled_width(6) == 2


def test_fuse_identity_projections():
    eye = np.eye(4)
    w = MlaWeights(w_dq=eye, w_uq=eye[None], w_dkv=eye, w_uk=eye[None], w_uv=eye[None], wo=eye)
    f = mla_fuse(w)
    np.testing.assert_array_equal(f.wq_fused[0], eye)
    np.testing.assert_array_equal(f.wvo_fused[0], eye)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shared", [True, False])
@pytest.mark.parametrize("rope", [None, RopeConfig(6)])
def test_fused_equals_unfused(seed, shared, rope):
    rng = np.random.default_rng(seed)
    w = MlaWeights.random(4, 16, 8, 6, shared_kv=shared, rng=rng)
    x = rng.standard_normal((9, 16))
    mode = "none" if rope is None else "latent"
    for causal in (False, True):
        got = mla_forward_fused(mla_fuse(w), x, rope=rope, causal=causal)
        assert relative_error(got, mla_forward_unfused(w, x, mode, rope, causal)) <= 1e-10


def test_fused_parameter_count():
    w = MlaWeights.random(4, 16, 8, 6, rng=0)
    assert mla_fuse(w).n_parameters() == 4 * 16 * 6 + 16 * 6 + 4 * 6 * 16


@pytest.mark.parametrize("seed", SEEDS)
def test_gqa_key_mode_rank(seed):
    pair = gqa_lift(GqaWeights.random(4, 2, 16, rng=seed))
    assert numerical_rank(matricize(pair.w_pre, 3)) <= 8
    assert mode_ranks(pair.w_pre) == theoretical_ranks("gqa", 4, 16, n_kv=2)[0]


@pytest.mark.parametrize("seed", SEEDS)
def test_mla_rank_bounds(seed):
    pair = mla_lift(MlaWeights.random(4, 16, 6, 4, rng=seed))
    pre, post = mode_ranks(pair.w_pre), mode_ranks(pair.w_post)
    assert pre[1] <= 6 and pre[2] <= 4 and post[2] <= 4 and post[1] <= 16
    assert (pre, post) == theoretical_ranks("mla", 4, 16, d_cq=6, d_ck=4)


@pytest.mark.parametrize("seed", SEEDS)
def test_mha_generic_ranks(seed):
    pair = stack_attention_tensors(MhaWeights.random(4, 16, rng=seed))
    assert mode_ranks(pair.w_pre)[1:] == (16, 16)
    assert mode_ranks(pair.w_post) == theoretical_ranks("mha", 4, 16)[1]


def test_canonical_core_single_head_is_identity():
    np.testing.assert_array_equal(canonical_core(1, 5, 5), np.eye(5)[None])


@pytest.mark.parametrize("layout", ["head_major", "kolda"])
def test_canonical_core_delta_structure(layout):
    core = canonical_core(3, 12, 4, layout)
    for i in range(3):
        assert np.count_nonzero(core[i]) == 4
        assert set(core[i][core[i] != 0]) == {1.0}


@pytest.mark.parametrize("seed", SEEDS)
def test_canonical_core_reconstruction(seed):
    w = MhaWeights.random(4, 16, rng=seed)
    pair = stack_attention_tensors(w)
    head_major = multi_mode_product(canonical_core(4, 16, 4), (np.eye(4), w.wq, w.wk))
    assert relative_error(head_major, pair.w_pre) <= 1e-12
    q, k, _, _ = w.head_blocks()
    uq, uk = stacked_head_unfolding(q), stacked_head_unfolding(k)
    p = head_permutation(4, 4)
    np.testing.assert_array_equal(w.wq @ p, uq)
    kolda = multi_mode_product(canonical_core(4, 16, 4, "kolda"), (np.eye(4), uq, uk))
    assert relative_error(kolda, pair.w_pre) <= 1e-12


def test_theoretical_ranks_unknown_kind():
    with pytest.raises(ValueError):
        theoretical_ranks("rnn", 4, 16)
