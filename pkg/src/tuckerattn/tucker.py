"""Tucker-parametrized attention.

The pre-softmax tensor is ``core_pre x_1 u1 x_2 u2 x_3 u3`` and the
post-softmax tensor is ``core_post x_1 ut1 x_2 ut2 x_3 ut3``. The forward pass
never forms either tensor: queries live in the latent key space of width
``r3`` and all heads share one key/value stream ``K = X u3``, ``V = X ut3``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .attention_reference import AttentionTensorPair, softmax_rows
from .rope import RopeConfig, rotate_rows
from .streaming_softmax import naive_attention, streaming_attention
from .tensor_core import mode_product, multi_mode_product

ARRAY_FIELDS = ("core_pre", "core_post", "u1", "u2", "u3", "ut1", "ut2", "ut3")


@dataclass
class TuckerAttentionParams:
    """Cores and basis matrices of one Tucker attention layer.

    With ``shared_kv`` the value side reuses ``u3`` and ``ut3`` is ``None``.
    ``scale_dim`` is the divisor under the square root in the scores; it
    defaults to ``d_model / n_H`` at construction helpers.
    """

    core_pre: np.ndarray
    core_post: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray
    ut1: np.ndarray
    ut2: np.ndarray
    ut3: np.ndarray | None
    scale_dim: float
    shared_kv: bool = False

    def __post_init__(self):
        for name in ARRAY_FIELDS:
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64))
        if self.shared_kv:
            if self.ut3 is not None and not np.array_equal(self.ut3, self.u3):
                raise ValueError("shared_kv parameters must not carry a separate ut3")
            self.ut3 = None
        elif self.ut3 is None:
            raise ValueError("separated parameters need ut3")
        self._validate()

    def _validate(self):
        r1, r2, r3 = self.core_pre.shape
        s1, s2, s3 = self.core_post.shape
        n_h, d = self.u1.shape[0], self.u2.shape[0]
        expect = {
            "u1": (n_h, r1), "u2": (d, r2), "u3": (d, r3),
            "ut1": (n_h, s1), "ut2": (d, s2), "ut3": (d, s3),
        }
        for name, shape in expect.items():
            arr = self.value_factor if name == "ut3" else getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if r1 > n_h or s1 > n_h or max(r2, r3, s2, s3) > d:
            raise ValueError("Tucker ranks exceed tensor dimensions")
        if not self.scale_dim > 0:
            raise ValueError("scale_dim must be positive")

    @property
    def value_factor(self) -> np.ndarray:
        return self.u3 if self.shared_kv else self.ut3

    @property
    def n_heads(self) -> int:
        return self.u1.shape[0]

    @property
    def d_model(self) -> int:
        return self.u2.shape[0]

    @property
    def ranks_pre(self) -> tuple:
        return tuple(self.core_pre.shape)

    @property
    def ranks_post(self) -> tuple:
        return tuple(self.core_post.shape)

    def arrays(self) -> dict:
        """Trainable arrays by field name (``ut3`` omitted when shared)."""
        return {n: getattr(self, n) for n in ARRAY_FIELDS if getattr(self, n) is not None}

    def replace(self, **arrays) -> "TuckerAttentionParams":
        return dataclasses.replace(self, **arrays)

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays().values())


def _orthonormal_columns(rng, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, rows)))
    q = q * np.sign(np.diag(r))
    return q[:, :cols]


def random_params(n_heads: int, d_model: int, ranks_pre, ranks_post=None, shared_kv=False,
                  rng=None, scale_dim=None) -> TuckerAttentionParams:
    """Random initialization: orthonormal factor columns, cores scaled by ``(r1 r2 r3)^-1/2``."""
    rng = np.random.default_rng(rng)
    ranks_pre = tuple(ranks_pre)
    ranks_post = ranks_pre if ranks_post is None else tuple(ranks_post)
    if shared_kv and ranks_pre[2] != ranks_post[2]:
        raise ValueError("shared_kv requires equal key and value ranks")
    core_pre = rng.standard_normal(ranks_pre) / np.sqrt(np.prod(ranks_pre))
    core_post = rng.standard_normal(ranks_post) / np.sqrt(np.prod(ranks_post))
    u1 = _orthonormal_columns(rng, n_heads, ranks_pre[0])
    u2 = _orthonormal_columns(rng, d_model, ranks_pre[1])
    u3 = _orthonormal_columns(rng, d_model, ranks_pre[2])
    ut1 = _orthonormal_columns(rng, n_heads, ranks_post[0])
    ut2 = _orthonormal_columns(rng, d_model, ranks_post[1])
    ut3 = None if shared_kv else _orthonormal_columns(rng, d_model, ranks_post[2])
    return TuckerAttentionParams(
        core_pre, core_post, u1, u2, u3, ut1, ut2, ut3,
        scale_dim=d_model / n_heads if scale_dim is None else scale_dim,
        shared_kv=shared_kv,
    )


def materialize(params: TuckerAttentionParams) -> AttentionTensorPair:
    w_pre = multi_mode_product(params.core_pre, (params.u1, params.u2, params.u3))
    w_post = multi_mode_product(params.core_post, (params.ut1, params.ut2, params.value_factor))
    return AttentionTensorPair(w_pre, w_post)


def latent_queries(params: TuckerAttentionParams, x) -> np.ndarray:
    """``core_pre x_1 u1 x_2 (X u2)``, shape ``(n_H, N, r3)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return mode_product(mode_product(params.core_pre, params.u1, 1), x @ params.u2, 2)


def combine_heads(params: TuckerAttentionParams, z) -> np.ndarray:
    """Map per-head latent values ``z`` (n_H, N, rt3) to the model output (N, d)."""
    g = mode_product(params.core_post, params.ut1, 1)
    y = np.einsum("inc,ibc->nb", z, g)
    return y @ params.ut2.T


def _check_x(params, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_model or x.shape[0] < 1:
        raise ValueError(f"input must be (N >= 1, {params.d_model}), got {x.shape}")
    return x


def _check_rope(params, rope):
    if rope is not None and rope.dim != params.ranks_pre[2]:
        raise ValueError(
            f"latent RoPE acts on the key rank r3={params.ranks_pre[2]}, got dim {rope.dim}"
        )


def tucker_forward(params: TuckerAttentionParams, x, causal: bool = False,
                   rope: RopeConfig | None = None, chunk: int | None = None,
                   positions=None) -> np.ndarray:
    """Factored attention output, shape ``(N, d_model)``.

    Without ``rope`` this equals the tensor-form attention of
    ``materialize(params)``. With ``rope`` the latent queries and keys are
    rotated in the ``r3``-dimensional key space. ``chunk`` switches the
    softmax-value contraction to the online-softmax streaming path.
    """
    x = _check_x(params, x)
    _check_rope(params, rope)
    q_hat = latent_queries(params, x)
    k = x @ params.u3
    v = x @ params.value_factor
    if rope is not None:
        if positions is None:
            positions = np.arange(x.shape[0])
        q_hat = rotate_rows(q_hat, rope, positions)
        k = rotate_rows(k, rope, positions)
    scale = 1.0 / np.sqrt(params.scale_dim)
    if chunk is None:
        z = naive_attention(q_hat, k, v, scale=scale, causal=causal)
    else:
        z = streaming_attention(q_hat, k, v, chunk, scale=scale, causal=causal)
    return combine_heads(params, z)


@dataclass
class KvCache:
    """Append-only cache of latent key rows ``x u3`` and value rows ``x ut3``.

    In shared mode only one set of rows is stored and ``v_rows`` aliases it.
    """

    r_key: int
    r_value: int
    shared: bool = False
    _k: list = field(default_factory=list, repr=False)
    _v: list = field(default_factory=list, repr=False)

    @classmethod
    def for_params(cls, params: TuckerAttentionParams) -> "KvCache":
        return cls(params.ranks_pre[2], params.ranks_post[2], params.shared_kv)

    @property
    def t(self) -> int:
        return len(self._k)

    @property
    def k_rows(self) -> np.ndarray:
        return np.array(self._k).reshape(self.t, self.r_key)

    @property
    def v_rows(self) -> np.ndarray:
        if self.shared:
            return self.k_rows
        return np.array(self._v).reshape(self.t, self.r_value)

    def append(self, k_row, v_row=None):
        self._k.append(np.array(k_row, dtype=np.float64))
        if not self.shared:
            self._v.append(np.array(v_row, dtype=np.float64))

    def stored_values(self) -> int:
        """Number of scalars held by the cache."""
        return self.t * (self.r_key if self.shared else self.r_key + self.r_value)


class CachePositionError(RuntimeError):
    """Raised when a decode step is not at the next cache position."""


def decode_step(params: TuckerAttentionParams, cache: KvCache, x_last, position: int,
                rope: RopeConfig | None = None):
    """Attend from one new token to itself and every cached token.

    Appends the token's latent key (and value) to ``cache`` and returns
    ``(output_row, cache)``; the row equals the last row of the causal
    :func:`tucker_forward` over the full prefix.
    """
    if position != cache.t:
        raise CachePositionError(f"cache holds {cache.t} tokens, got position {position}")
    _check_rope(params, rope)
    x_last = np.asarray(x_last, dtype=np.float64).reshape(1, -1)
    _check_x(params, x_last)
    k_new = (x_last @ params.u3)[0]
    cache.append(k_new, None if params.shared_kv else (x_last @ params.ut3)[0])

    q_hat = latent_queries(params, x_last)
    k = cache.k_rows
    if rope is not None:
        q_hat = rotate_rows(q_hat, rope, [position])
        k = rotate_rows(k, rope, np.arange(cache.t))
    scores = np.einsum("inc,mc->inm", q_hat, k) / np.sqrt(params.scale_dim)
    z = np.einsum("inm,mc->inc", softmax_rows(scores), cache.v_rows)
    return combine_heads(params, z)[0], cache


def kv_cache_bytes(params: TuckerAttentionParams, n_tokens: int, bytes_per_value: int) -> int:
    """Per-layer cache size: ``N r3`` values when shared, ``N (r3 + rt3)`` otherwise."""
    if n_tokens < 0:
        raise ValueError("n_tokens must be nonnegative")
    width = params.ranks_pre[2] if params.shared_kv else params.ranks_pre[2] + params.ranks_post[2]
    return n_tokens * width * bytes_per_value
