"""GQA/MQA and MLA forward passes and their lifts to the attention tensor pair."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention_reference import (
    AttentionTensorPair,
    MhaWeights,
    softmax_rows,
    split_columns,
    stack_from_heads,
)
from .rope import DEFAULT_BASE, RopeConfig, decoupled_rope_scores, rotate_rows
from .tensor_core import matricize


def _checked_input(x, d_model):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d_model or x.shape[0] < 1:
        raise ValueError(f"input must be (N >= 1, {d_model}), got {x.shape}")
    return x


@dataclass
class GqaWeights:
    """Grouped-query attention: ``n_kv`` key/value blocks shared by contiguous query-head groups."""

    wq: np.ndarray
    wk_groups: np.ndarray
    wv_groups: np.ndarray
    wo: np.ndarray
    n_heads: int

    def __post_init__(self):
        self.wq = np.asarray(self.wq, dtype=np.float64)
        self.wo = np.asarray(self.wo, dtype=np.float64)
        self.wk_groups = np.asarray(self.wk_groups, dtype=np.float64)
        self.wv_groups = np.asarray(self.wv_groups, dtype=np.float64)
        d = self.wq.shape[0]
        if self.wq.shape != (d, d) or self.wo.shape != (d, d):
            raise ValueError("wq and wo must be d_model x d_model")
        if d % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        shape = (self.n_kv, d, d // self.n_heads)
        if self.wk_groups.shape != shape or self.wv_groups.shape != shape:
            raise ValueError(f"key/value groups must have shape {shape}")
        if self.n_heads % self.n_kv:
            raise ValueError(f"n_heads={self.n_heads} not divisible by n_kv={self.n_kv}")

    @property
    def n_kv(self) -> int:
        return self.wk_groups.shape[0]

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def group_of(self, head: int) -> int:
        return head * self.n_kv // self.n_heads

    def head_blocks(self):
        groups = [self.group_of(i) for i in range(self.n_heads)]
        return (
            split_columns(self.wq, self.n_heads),
            self.wk_groups[groups],
            self.wv_groups[groups],
            self.wo.reshape(self.n_heads, self.d_head, self.d_model),
        )

    def as_mha(self) -> MhaWeights:
        """Equivalent MHA with each group's key/value block duplicated per head."""
        q, k, v, o = self.head_blocks()
        join = lambda b: b.transpose(1, 0, 2).reshape(self.d_model, -1)  # noqa: E731
        return MhaWeights(join(q), join(k), join(v), o.reshape(self.d_model, -1), self.n_heads)

    def n_parameters(self) -> int:
        return self.wq.size + self.wo.size + self.wk_groups.size + self.wv_groups.size

    @classmethod
    def random(cls, n_heads, n_kv, d_model, rng=None):
        rng = np.random.default_rng(rng)
        s = d_model ** -0.5
        d_head = d_model // n_heads
        return cls(
            s * rng.standard_normal((d_model, d_model)),
            s * rng.standard_normal((n_kv, d_model, d_head)),
            s * rng.standard_normal((n_kv, d_model, d_head)),
            s * rng.standard_normal((d_model, d_model)),
            n_heads,
        )


def gqa_forward(w: GqaWeights, x, causal: bool = False, rope: RopeConfig | None = None) -> np.ndarray:
    """GQA output; with ``rope`` each head's query and key are rotated in the head dimension."""
    x = _checked_input(x, w.d_model)
    q = np.einsum("nd,idh->inh", x, split_columns(w.wq, w.n_heads))
    k = np.einsum("nd,gdh->gnh", x, w.wk_groups)
    v = np.einsum("nd,gdh->gnh", x, w.wv_groups)
    if rope is not None:
        pos = np.arange(x.shape[0])
        q = rotate_rows(q, rope, pos)
        # rotated once per group, then broadcast
        k = rotate_rows(k, rope, pos)
    o = w.wo.reshape(w.n_heads, w.d_head, w.d_model)
    out = np.zeros_like(x)
    for i in range(w.n_heads):
        g = w.group_of(i)
        p = softmax_rows(q[i] @ k[g].T / np.sqrt(w.d_head), causal)
        out += p @ v[g] @ o[i]
    return out


def gqa_lift(w: GqaWeights) -> AttentionTensorPair:
    return stack_from_heads(*w.head_blocks())


@dataclass
class MlaWeights:
    """Multi-head latent attention projections.

    Shapes: ``w_dq (d, dcq)``, ``w_uq (n_H, dcq, d_H)``, ``w_dkv (d, dck)``,
    ``w_uk (n_H, dck, d_H)``, ``w_uv (n_H, dck, d_H)``, ``wo (d, d)``.
    ``w_dv (d, dck)`` is present only for separated key/value
    down-projections. ``wq_rot``/``wk_rot`` ``(n_H, d, d_r)`` are the optional
    rotational channels for decoupled RoPE.
    """

    w_dq: np.ndarray
    w_uq: np.ndarray
    w_dkv: np.ndarray
    w_uk: np.ndarray
    w_uv: np.ndarray
    wo: np.ndarray
    w_dv: np.ndarray | None = None
    wq_rot: np.ndarray | None = None
    wk_rot: np.ndarray | None = None

    def __post_init__(self):
        for name in ("w_dq", "w_uq", "w_dkv", "w_uk", "w_uv", "wo", "w_dv", "wq_rot", "wk_rot"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64))
        d, dcq = self.w_dq.shape
        dck = self.w_dkv.shape[1]
        n_h, _, d_h = self.w_uq.shape
        if n_h * d_h != d or self.wo.shape != (d, d):
            raise ValueError("n_H * d_H must equal d_model and wo must be d x d")
        if dcq > d or dck > d:
            raise ValueError("latent dimensions cannot exceed d_model")
        if self.w_uq.shape != (n_h, dcq, d_h):
            raise ValueError(f"w_uq must be {(n_h, dcq, d_h)}")
        for name in ("w_uk", "w_uv"):
            if getattr(self, name).shape != (n_h, dck, d_h):
                raise ValueError(f"{name} must be {(n_h, dck, d_h)}")
        if self.w_dkv.shape != (d, dck) or (self.w_dv is not None and self.w_dv.shape != (d, dck)):
            raise ValueError("down-projections for keys/values must be d x dck")
        if (self.wq_rot is None) != (self.wk_rot is None):
            raise ValueError("wq_rot and wk_rot must be given together")
        if self.wq_rot is not None:
            if self.wq_rot.shape != self.wk_rot.shape or self.wq_rot.shape[:2] != (n_h, d):
                raise ValueError("rotational projections must be (n_H, d_model, d_r)")

    @property
    def n_heads(self) -> int:
        return self.w_uq.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_dq.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_uq.shape[2]

    @property
    def d_cq(self) -> int:
        return self.w_dq.shape[1]

    @property
    def d_ck(self) -> int:
        return self.w_dkv.shape[1]

    @property
    def shared_kv(self) -> bool:
        return self.w_dv is None

    @property
    def value_down(self) -> np.ndarray:
        return self.w_dkv if self.w_dv is None else self.w_dv

    def head_blocks(self):
        """Effective per-head ``(Q, K, V, O)`` blocks of the induced MHA."""
        q = np.einsum("dc,ich->idh", self.w_dq, self.w_uq)
        k = np.einsum("dc,ich->idh", self.w_dkv, self.w_uk)
        v = np.einsum("dc,ich->idh", self.value_down, self.w_uv)
        o = self.wo.reshape(self.n_heads, self.d_head, self.d_model)
        return q, k, v, o

    def n_parameters(self) -> int:
        """Stored elements of the attention projections, rotational channels excluded."""
        names = ("w_dq", "w_uq", "w_dkv", "w_uk", "w_uv", "wo", "w_dv")
        return sum(getattr(self, n).size for n in names if getattr(self, n) is not None)

    @classmethod
    def random(cls, n_heads, d_model, d_cq, d_ck, shared_kv=True, rope_dim=None, rng=None):
        """Random weights; ``rope_dim`` adds decoupled rotational channels of that width."""
        rng = np.random.default_rng(rng)
        d_head = d_model // n_heads
        g = lambda *shape: rng.standard_normal(shape) / np.sqrt(shape[-2])  # noqa: E731
        w = cls(
            w_dq=g(d_model, d_cq),
            w_uq=g(n_heads, d_cq, d_head),
            w_dkv=g(d_model, d_ck),
            w_uk=g(n_heads, d_ck, d_head),
            w_uv=g(n_heads, d_ck, d_head),
            wo=g(d_model, d_model),
            w_dv=None if shared_kv else g(d_model, d_ck),
        )
        if rope_dim is not None:
            w.wq_rot = g(n_heads, d_model, rope_dim)
            w.wk_rot = g(n_heads, d_model, rope_dim)
            w.__post_init__()
        return w


DEFAULT_DECOUPLED_FRACTION = 0.5


def default_decoupled_width(d_head: int) -> int:
    width = int(d_head * DEFAULT_DECOUPLED_FRACTION)
    return width - width % 2


def mla_forward_unfused(w: MlaWeights, x, rope_mode: str = "none", rope: RopeConfig | None = None,
                        causal: bool = False) -> np.ndarray:
    """MLA forward with separate down/up projections.

    ``rope_mode``:

    * ``"none"``: plain scores ``q_i k_i^T``.
    * ``"decoupled"``: adds rotated scores from ``wq_rot``/``wk_rot``; the
      rotation width is their last dimension, ``rope`` supplies the base.
    * ``"latent"``: the per-head query is mapped into the key latent space by
      ``w_uk_i^T`` and both sides are rotated there (``d_ck`` must be even).

    Scores are divided by ``sqrt(d_H)`` in every mode.
    """
    x = _checked_input(x, w.d_model)
    pos = np.arange(x.shape[0])
    c_q = x @ w.w_dq
    c_kv = x @ w.w_dkv
    c_v = x @ w.value_down
    q = np.einsum("nc,ich->inh", c_q, w.w_uq)
    k = np.einsum("nc,ich->inh", c_kv, w.w_uk)
    v = np.einsum("nc,ich->inh", c_v, w.w_uv)

    if rope_mode == "none":
        scores = np.einsum("imh,inh->imn", q, k)
    elif rope_mode == "decoupled":
        if w.wq_rot is None:
            raise ValueError("decoupled RoPE needs wq_rot and wk_rot")
        base = rope.base if rope is not None else DEFAULT_BASE
        cfg = RopeConfig(w.wq_rot.shape[2], base)
        scores = decoupled_rope_scores(q, k, x, w.wq_rot, w.wk_rot, cfg, pos)
    elif rope_mode == "latent":
        cfg = rope if rope is not None else RopeConfig(w.d_ck)
        if cfg.dim != w.d_ck:
            raise ValueError(f"latent RoPE acts on d_ck={w.d_ck}, got dim {cfg.dim}")
        q_lat = np.einsum("inh,ich->inc", q, w.w_uk)
        scores = np.einsum(
            "imc,nc->imn", rotate_rows(q_lat, cfg, pos), rotate_rows(c_kv, cfg, pos)
        )
    else:
        raise ValueError(f"unknown rope_mode {rope_mode!r}")

    p = softmax_rows(scores / np.sqrt(w.d_head), causal)
    o = w.wo.reshape(w.n_heads, w.d_head, w.d_model)
    return np.einsum("imn,inh,ihd->md", p, v, o)


@dataclass
class MlaFused:
    """Inference-time MLA with query-side maps absorbed into the key latent space.

    ``wq_fused[i] = w_dq @ w_uq[i] @ w_uk[i]^T`` is ``d x dck`` and
    ``wvo_fused[i] = w_uv[i] @ wo_i`` is ``dck x d``; keys and values stay in
    the cached latent ``X w_dkv`` (or ``X w_dv``).
    """

    wq_fused: np.ndarray
    w_dkv: np.ndarray
    wvo_fused: np.ndarray
    w_dv: np.ndarray | None
    d_head: int

    @property
    def n_heads(self) -> int:
        return self.wq_fused.shape[0]

    def n_parameters(self) -> int:
        mats = (self.wq_fused, self.w_dkv, self.wvo_fused, self.w_dv)
        return sum(m.size for m in mats if m is not None)


def mla_fuse(w: MlaWeights) -> MlaFused:
    """Fold ``W^DQ W^UQ_i W^UK_i^T`` into one query map per head.

    The query chain ends in the transposed key up-projection, which is the
    composition that makes the latent scores dimensionally consistent.
    """
    wq_fused = np.einsum("dc,ich,ikh->idk", w.w_dq, w.w_uq, w.w_uk)
    o = w.wo.reshape(w.n_heads, w.d_head, w.d_model)
    wvo = np.einsum("ich,ihd->icd", w.w_uv, o)
    return MlaFused(wq_fused, w.w_dkv.copy(), wvo, None if w.w_dv is None else w.w_dv.copy(), w.d_head)


def mla_forward_fused(f: MlaFused, x, rope: RopeConfig | None = None, causal: bool = False) -> np.ndarray:
    """Forward pass of :class:`MlaFused`; ``rope`` is latent RoPE over ``d_ck``."""
    x = _checked_input(x, f.w_dkv.shape[0])
    c_kv = x @ f.w_dkv
    c_v = c_kv if f.w_dv is None else x @ f.w_dv
    q_lat = np.einsum("nd,idc->inc", x, f.wq_fused)
    if rope is not None:
        pos = np.arange(x.shape[0])
        q_lat = rotate_rows(q_lat, rope, pos)
        c_kv = rotate_rows(c_kv, rope, pos)
    p = softmax_rows(np.einsum("imc,nc->imn", q_lat, c_kv) / np.sqrt(f.d_head), causal)
    z = np.einsum("imn,nc->imc", p, c_v)
    return np.einsum("imc,icd->md", z, f.wvo_fused)


def mla_lift(w: MlaWeights) -> AttentionTensorPair:
    return stack_from_heads(*w.head_blocks())


def canonical_core(n_heads: int, d_model: int, d_head: int, layout: str = "head_major") -> np.ndarray:
    """Structured selector core of the MHA factorization.

    Slice ``i`` has ones on the diagonal entries belonging to head ``i``.
    With ``layout="head_major"`` head ``i`` owns indices ``i*d_H + l`` (the
    column order of ``W^Q``); with ``layout="kolda"`` it owns ``i + n_H*l``,
    the column order of the mode-2 unfolding of the stacked head blocks.
    """
    if n_heads * d_head != d_model:
        raise ValueError("n_heads * d_head must equal d_model")
    core = np.zeros((n_heads, d_model, d_model))
    ell = np.arange(d_head)
    for i in range(n_heads):
        if layout == "head_major":
            idx = i * d_head + ell
        elif layout == "kolda":
            idx = i + n_heads * ell
        else:
            raise ValueError(f"unknown layout {layout!r}")
        core[i, idx, idx] = 1.0
    return core


def head_permutation(n_heads: int, d_head: int) -> np.ndarray:
    """Permutation ``P`` with ``W @ P`` equal to the mode-2 unfolding of the head stack of ``W``."""
    d = n_heads * d_head
    p = np.zeros((d, d))
    for i in range(n_heads):
        for ell in range(d_head):
            p[i * d_head + ell, i + n_heads * ell] = 1.0
    return p


def stacked_head_unfolding(blocks) -> np.ndarray:
    """Mode-2 unfolding of ``(n_H, d, d_H)`` head blocks, shape ``(d, n_H*d_H)``."""
    return matricize(blocks, 2)


def theoretical_ranks(kind: str, n_heads: int, d_model: int, d_head: int | None = None,
                      n_kv: int | None = None, d_cq: int | None = None, d_ck: int | None = None):
    """Maximal Tucker ranks ``(pre, post)`` of the attention tensors of a variant."""
    d_head = d_model // n_heads if d_head is None else d_head
    if kind == "mha":
        r = (n_heads, d_model, d_model)
        return r, r
    if kind == "mqa":
        r = (n_heads, d_model, d_head)
        return r, r
    if kind == "gqa":
        r = (n_heads, d_model, n_kv * d_head)
        return r, r
    if kind == "mla":
        return (n_heads, d_cq, d_ck), (n_heads, d_model, d_ck)
    raise ValueError(f"unknown variant {kind!r}")
