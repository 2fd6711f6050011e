"""Converting dense MHA weights into GQA, MLA and Tucker parametrizations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention_reference import AttentionTensorPair, MhaWeights, split_columns, stack_attention_tensors
from .tensor_core import hosvd, matricize, multi_mode_product, relative_error, svd, truncated_svd
from .tucker import TuckerAttentionParams, materialize
from .variants import GqaWeights, MlaWeights


def mha_to_gqa(w: MhaWeights, n_kv: int) -> GqaWeights:
    """Keep the first head's key/value block in each of ``n_kv`` contiguous groups."""
    if n_kv < 1 or w.n_heads % n_kv:
        raise ValueError(f"n_kv={n_kv} must divide n_heads={w.n_heads}")
    _, k, v, _ = w.head_blocks()
    keep = np.arange(n_kv) * (w.n_heads // n_kv)
    return GqaWeights(w.wq.copy(), k[keep].copy(), v[keep].copy(), w.wo.copy(), w.n_heads)


def _low_rank_split(m: np.ndarray, r: int):
    """``m ~ down @ up`` with orthonormal ``down`` (d x r) and ``up = diag(s) V^T``."""
    u, s, v = truncated_svd(m, r)
    return u, s[:, None] * v.T


def mha_to_mla(w: MhaWeights, d_cq: int, d_ck: int, shared: bool = True) -> MlaWeights:
    """Truncated-SVD factorization of ``W^Q``, ``W^K`` and ``W^V``; ``W^O`` is kept as is.

    In shared mode the value's own down-projection is dropped and the key
    down-projection is reused; the value up-projection is then refit by
    projecting ``W^V`` onto that basis (the least-squares optimum, since the
    basis is orthonormal).
    """
    d = w.d_model
    for name, r in (("d_cq", d_cq), ("d_ck", d_ck)):
        if not 1 <= r <= d:
            raise ValueError(f"{name}={r} out of range 1..{d}")
    w_dq, uq = _low_rank_split(w.wq, d_cq)
    w_dkv, uk = _low_rank_split(w.wk, d_ck)
    if shared:
        w_dv = None
        uv = w_dkv.T @ w.wv
    else:
        w_dv, uv = _low_rank_split(w.wv, d_ck)
    heads = lambda up: split_columns(up, w.n_heads)  # noqa: E731
    return MlaWeights(
        w_dq=w_dq, w_uq=heads(uq), w_dkv=w_dkv, w_uk=heads(uk), w_uv=heads(uv),
        wo=w.wo.copy(), w_dv=w_dv,
    )


def tucker_from_pair(pair: AttentionTensorPair, ranks_pre, ranks_post=None, shared_kv=False,
                     scale_dim=None) -> TuckerAttentionParams:
    """HOSVD of both tensors of ``pair``.

    With ``shared_kv`` the key-mode basis of the pre-softmax tensor also
    serves the value mode; the value-side core is the post-softmax tensor
    projected onto that basis.
    """
    ranks_pre = tuple(ranks_pre)
    ranks_post = ranks_pre if ranks_post is None else tuple(ranks_post)
    if shared_kv and ranks_pre[2] != ranks_post[2]:
        raise ValueError("shared_kv requires equal key and value ranks")
    pre = hosvd(pair.w_pre, ranks_pre)
    post = hosvd(pair.w_post, ranks_post)
    u1, u2, u3 = pre.factors
    ut1, ut2, ut3 = post.factors
    core_post = post.core
    if shared_kv:
        ut3 = None
        core_post = multi_mode_product(pair.w_post, (ut1.T, ut2.T, u3.T))
    if scale_dim is None:
        scale_dim = pair.d_model / pair.n_heads
    return TuckerAttentionParams(pre.core, core_post, u1, u2, u3, ut1, ut2, ut3,
                                 scale_dim=scale_dim, shared_kv=shared_kv)


def mha_to_tucker(w: MhaWeights, ranks_pre, ranks_post=None, shared_kv=False) -> TuckerAttentionParams:
    return tucker_from_pair(stack_attention_tensors(w), ranks_pre, ranks_post, shared_kv,
                            scale_dim=w.d_head)


@dataclass
class ConversionReport:
    """Relative Frobenius reconstruction errors, keyed by what was approximated."""

    errors: dict = field(default_factory=dict)

    def rows(self):
        return sorted(self.errors.items())


def report_gqa(src: MhaWeights, dst: GqaWeights) -> ConversionReport:
    mha = dst.as_mha()
    return ConversionReport({"wk": relative_error(mha.wk, src.wk), "wv": relative_error(mha.wv, src.wv)})


def report_mla(src: MhaWeights, dst: MlaWeights) -> ConversionReport:
    q, k, v, _ = dst.head_blocks()
    join = lambda b: b.transpose(1, 0, 2).reshape(src.d_model, -1)  # noqa: E731
    return ConversionReport({
        "wq": relative_error(join(q), src.wq),
        "wk": relative_error(join(k), src.wk),
        "wv": relative_error(join(v), src.wv),
    })


def report_tucker(src: MhaWeights, dst: TuckerAttentionParams) -> ConversionReport:
    pair = stack_attention_tensors(src)
    approx = materialize(dst)
    return ConversionReport({
        "w_pre": relative_error(approx.w_pre, pair.w_pre),
        "w_post": relative_error(approx.w_post, pair.w_post),
    })


SPECTRUM_MODES = {
    "pre": ("head", "query", "key"),
    "post": ("head", "output", "value"),
}


@dataclass
class Spectrum:
    """Normalized singular values of each unfolding, keyed by ``(tensor, mode_name)``.

    A zero tensor gives empty lists and is listed in ``zero_tensors``.
    """

    values: dict
    zero_tensors: tuple = ()

    def items(self):
        for tensor, modes in SPECTRUM_MODES.items():
            for mode in modes:
                yield tensor, mode, self.values[(tensor, mode)]


def normalized_spectrum(t, mode: int) -> np.ndarray:
    _, s, _ = svd(matricize(t, mode))
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(0)
    return s / s[0]


def spectrum(pair: AttentionTensorPair) -> Spectrum:
    values, zero = {}, []
    for tensor, arr in (("pre", pair.w_pre), ("post", pair.w_post)):
        if not np.any(arr):
            zero.append(tensor)
        for mode, name in enumerate(SPECTRUM_MODES[tensor], start=1):
            values[(tensor, name)] = normalized_spectrum(arr, mode)
    return Spectrum(values, tuple(zero))
