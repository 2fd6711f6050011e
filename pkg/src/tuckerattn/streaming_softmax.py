"""Chunked attention with online softmax normalization.

All query heads read one shared key/value stream, so a single pass over the
key/value chunks serves every head. The full score matrix is never formed;
only ``chunk x chunk`` tiles per head are live at a time.
"""

from __future__ import annotations

import math

import numpy as np

from .attention_reference import softmax_rows


def naive_attention(q_heads, k, v, scale: float = 1.0, causal: bool = False) -> np.ndarray:
    """``softmax(scale * Q_i K^T) V`` per head, materializing the scores."""
    q_heads = np.asarray(q_heads, dtype=np.float64)
    scores = scale * np.einsum("inc,mc->inm", q_heads, np.asarray(k, dtype=np.float64))
    if causal:
        offset = scores.shape[2] - scores.shape[1]
        allowed = np.arange(scores.shape[2])[None, :] <= np.arange(scores.shape[1])[:, None] + offset
        scores = np.where(allowed, scores, -np.inf)
    return np.einsum("inm,mc->inc", softmax_rows(scores), np.asarray(v, dtype=np.float64))


def _check_shapes(q_heads, k, v):
    if q_heads.ndim != 3 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("expected q_heads (n_H, N_q, r), k (N, r), v (N, r_v)")
    if q_heads.shape[2] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(f"incompatible shapes {q_heads.shape}, {k.shape}, {v.shape}")
    if q_heads.shape[1] > k.shape[0]:
        raise ValueError("more queries than keys")


def streaming_attention(q_heads, k, v, chunk: int, scale: float = 1.0, causal: bool = False,
                        stats: dict | None = None) -> np.ndarray:
    """Online-softmax attention over sequence chunks.

    Parameters
    ----------
    q_heads : ndarray, shape (n_H, N_q, r)
    k : ndarray, shape (N, r)
    v : ndarray, shape (N, r_v)
    chunk : int
        Tile length for both queries and keys/values.
    scale : float
        Multiplier applied to the raw scores.
    causal : bool
        Query ``m`` sees keys ``n <= m + (N - N_q)``.
    stats : dict, optional
        If given, ``stats["kv_loads"]`` is incremented once per key/value
        chunk read.

    Returns
    -------
    ndarray, shape (n_H, N_q, r_v)
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    q_heads = np.asarray(q_heads, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_shapes(q_heads, k, v)
    n_heads, n_q, _ = q_heads.shape
    n_kv = k.shape[0]
    offset = n_kv - n_q
    out = np.empty((n_heads, n_q, v.shape[1]))

    for q0 in range(0, n_q, chunk):
        q_blk = q_heads[:, q0:q0 + chunk]
        rows = np.arange(q0, q0 + q_blk.shape[1])
        run_max = np.full(q_blk.shape[:2], -np.inf)
        run_sum = np.zeros(q_blk.shape[:2])
        acc = np.zeros(q_blk.shape[:2] + (v.shape[1],))
        last_key = rows[-1] + offset if causal else n_kv - 1
        for k0 in range(0, last_key + 1, chunk):
            k_blk, v_blk = k[k0:k0 + chunk], v[k0:k0 + chunk]
            if stats is not None:
                stats["kv_loads"] = stats.get("kv_loads", 0) + 1
            s = scale * np.einsum("inc,mc->inm", q_blk, k_blk)
            if causal:
                cols = np.arange(k0, k0 + k_blk.shape[0])
                s = np.where(cols[None, :] <= rows[:, None] + offset, s, -np.inf)
            new_max = np.maximum(run_max, s.max(axis=2))
            # the first chunk holds key 0, visible to every query, so new_max is finite
            p = np.exp(s - new_max[..., None])
            correction = np.exp(run_max - new_max)
            run_sum = run_sum * correction + p.sum(axis=2)
            acc = acc * correction[..., None] + np.einsum("inm,mc->inc", p, v_blk)
            run_max = new_max
        out[:, q0:q0 + q_blk.shape[1]] = acc / run_sum[..., None]
    return out


def chunk_load_count(n_heads: int, n_kv_effective: int, n_tokens: int, chunk: int,
                     per_sweep: bool = True) -> int:
    """Key/value chunk loads for the non-causal tiled schedule.

    Each of the ``n_kv_effective`` distinct key/value streams is read in
    ``ceil(N / chunk)`` tiles for one sweep of a query chunk; heads sharing a
    stream share the loads. With ``per_sweep=False`` the count covers all
    ``ceil(N / chunk)`` query chunks.
    """
    for name, val in (("n_heads", n_heads), ("n_kv_effective", n_kv_effective),
                      ("n_tokens", n_tokens), ("chunk", chunk)):
        if val < 1:
            raise ValueError(f"{name} must be positive, got {val}")
    if n_heads % n_kv_effective:
        raise ValueError("n_heads must be divisible by n_kv_effective")
    tiles = math.ceil(n_tokens / chunk)
    loads = n_kv_effective * tiles
    return loads if per_sweep else loads * tiles
