"""Reference multi-head attention, in per-head form and in tensor form.

These are the ground-truth paths every other attention implementation in the
package is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import mode_product


@dataclass
class MhaWeights:
    """Dense MHA projections.

    ``wq``, ``wk``, ``wv`` are ``d_model x d_model`` with head ``i`` owning
    columns ``i*d_H:(i+1)*d_H``; ``wo`` is ``d_model x d_model`` with head
    ``i`` owning the same block of rows.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    n_heads: int

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (arr.shape[0], arr.shape[0]):
                raise ValueError(f"{name} must be square, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        d = self.wq.shape[0]
        if any(getattr(self, n).shape[0] != d for n in ("wk", "wv", "wo")):
            raise ValueError("all projections must share d_model")
        if self.n_heads < 1 or d % self.n_heads:
            raise ValueError(f"d_model={d} is not divisible by n_heads={self.n_heads}")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def head_blocks(self):
        """Per-head arrays ``(Q, K, V, O)``; Q/K/V are ``(n_H, d, d_H)``, O is ``(n_H, d_H, d)``."""
        return (
            split_columns(self.wq, self.n_heads),
            split_columns(self.wk, self.n_heads),
            split_columns(self.wv, self.n_heads),
            self.wo.reshape(self.n_heads, self.d_head, self.d_model),
        )

    @classmethod
    def random(cls, n_heads: int, d_model: int, rng=None, scale=None) -> "MhaWeights":
        rng = np.random.default_rng(rng)
        scale = d_model ** -0.5 if scale is None else scale
        mats = [scale * rng.standard_normal((d_model, d_model)) for _ in range(4)]
        return cls(*mats, n_heads=n_heads)


@dataclass
class AttentionTensorPair:
    """Stacked pre-softmax tensor ``w_pre`` and post-softmax tensor ``w_post``.

    ``w_pre[i] = W^Q_i W^K_i^T`` and ``w_post[i] = (W^V_i W^O_i)^T``, both of
    shape ``(n_H, d_model, d_model)``.
    """

    w_pre: np.ndarray
    w_post: np.ndarray

    def __post_init__(self):
        self.w_pre = np.asarray(self.w_pre, dtype=np.float64)
        self.w_post = np.asarray(self.w_post, dtype=np.float64)
        if self.w_pre.ndim != 3 or self.w_pre.shape != self.w_post.shape:
            raise ValueError(
                f"tensor shapes differ or are not order 3: {self.w_pre.shape}, {self.w_post.shape}"
            )
        if self.w_pre.shape[1] != self.w_pre.shape[2]:
            raise ValueError("tensors must be (n_H, d_model, d_model)")

    @property
    def n_heads(self) -> int:
        return self.w_pre.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_pre.shape[1]


def split_columns(w: np.ndarray, n_heads: int) -> np.ndarray:
    """``(d, n_H*d_H)`` column-blocked matrix -> ``(n_H, d, d_H)``."""
    d, width = w.shape
    return w.reshape(d, n_heads, width // n_heads).transpose(1, 0, 2)


def join_columns(blocks: np.ndarray) -> np.ndarray:
    """Inverse of :func:`split_columns`."""
    n, d, dh = blocks.shape
    return blocks.transpose(1, 0, 2).reshape(d, n * dh)


def causal_mask(n: int) -> np.ndarray:
    """Boolean ``(n, n)`` mask that is True where key index exceeds query index."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def softmax_rows(scores, causal: bool = False) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    With ``causal=True`` the strict upper triangle of the last two axes is
    masked to zero probability.
    """
    s = np.array(scores, dtype=np.float64)
    if causal:
        s = np.where(causal_mask(s.shape[-1])[: s.shape[-2]], -np.inf, s)
    s = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(s)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_input(x, d_model: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d_model or x.shape[0] < 1:
        raise ValueError(f"input must be (N >= 1, {d_model}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input has non-finite entries")
    return x


def mha_forward(w: MhaWeights, x, causal: bool = False) -> np.ndarray:
    """``sum_i softmax(X Wq_i (X Wk_i)^T / sqrt(d_H)) X Wv_i Wo_i``."""
    x = _check_input(x, w.d_model)
    q, k, v, o = w.head_blocks()
    out = np.zeros_like(x)
    for i in range(w.n_heads):
        scores = (x @ q[i]) @ (x @ k[i]).T / np.sqrt(w.d_head)
        out += softmax_rows(scores, causal) @ (x @ v[i]) @ o[i]
    return out


def stack_from_heads(q, k, v, o) -> AttentionTensorPair:
    """Stack per-head blocks ``(n_H, d, d_H)`` x3 and ``(n_H, d_H, d)`` into the tensor pair."""
    w_pre = np.einsum("iah,ibh->iab", q, k)
    w_post = np.einsum("iah,ihb->iba", v, o)
    return AttentionTensorPair(w_pre, w_post)


def stack_attention_tensors(w: MhaWeights) -> AttentionTensorPair:
    return stack_from_heads(*w.head_blocks())


def tensor_mha_forward(pair: AttentionTensorPair, x, d_head: float, causal: bool = False) -> np.ndarray:
    """Attention computed directly from the tensor pair.

    ``H1 = softmax(W_pre x_2 X x_3 X / sqrt(d_head))`` has shape ``(n_H, N, N)``,
    ``H2 = W_post x_3 X`` has shape ``(n_H, d, N)`` and the output is
    ``out[j, k] = sum_{i, l} H1[i, j, l] H2[i, k, l]``.
    """
    x = _check_input(x, pair.d_model)
    scores = mode_product(mode_product(pair.w_pre, x, 2), x, 3) / np.sqrt(d_head)
    h1 = softmax_rows(scores, causal)
    h2 = mode_product(pair.w_post, x, 3)
    return np.einsum("ijl,ikl->jk", h1, h2)
