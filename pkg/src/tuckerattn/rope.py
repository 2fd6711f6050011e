"""Rotary position embeddings: standard per-head, latent, and decoupled.

Rotations act on row vectors from the right, ``x -> x @ R(pos)``, with
``R`` block diagonal over adjacent channel pairs ``(2j, 2j+1)``::

    [[cos(pos*theta_j), -sin(pos*theta_j)],
     [sin(pos*theta_j),  cos(pos*theta_j)]],   theta_j = base ** (-2j / dim)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BASE = 10000.0
LLAMA_BASE = 5e5


@dataclass(frozen=True)
class RopeConfig:
    dim: int
    base: float = DEFAULT_BASE

    def __post_init__(self):
        if self.dim < 0 or self.dim % 2:
            raise ValueError(f"rotation dimension must be even and nonnegative, got {self.dim}")
        if not self.base > 0:
            raise ValueError(f"base must be positive, got {self.base}")

    def frequencies(self) -> np.ndarray:
        j = np.arange(self.dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * j / self.dim)


def rope_matrix(cfg: RopeConfig, pos) -> np.ndarray:
    """Dense ``dim x dim`` rotation ``R(pos)``."""
    angles = pos * cfg.frequencies()
    c, s = np.cos(angles), np.sin(angles)
    r = np.zeros((cfg.dim, cfg.dim))
    even = np.arange(0, cfg.dim, 2)
    r[even, even] = c
    r[even, even + 1] = -s
    r[even + 1, even] = s
    r[even + 1, even + 1] = c
    return r


def rotate_rows(rows, cfg: RopeConfig, positions) -> np.ndarray:
    """Right-multiply each row along the second-to-last axis by ``R(position)``.

    ``rows`` has shape ``(..., N, dim)``; ``positions`` has length ``N``.
    Works pairwise on channels instead of forming the dense matrices.
    """
    rows = np.asarray(rows, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    if rows.shape[-1] != cfg.dim:
        raise ValueError(f"rows have width {rows.shape[-1]}, rotation dim is {cfg.dim}")
    if rows.shape[-2] != positions.shape[0]:
        raise ValueError(
            f"{rows.shape[-2]} rows but {positions.shape[0]} positions"
        )
    angles = positions[:, None] * cfg.frequencies()[None, :]
    c, s = np.cos(angles), np.sin(angles)
    even, odd = rows[..., 0::2], rows[..., 1::2]
    out = np.empty_like(rows)
    # (x_e, x_o) @ [[c, -s], [s, c]] = (x_e c + x_o s, -x_e s + x_o c)
    out[..., 0::2] = even * c + odd * s
    out[..., 1::2] = odd * c - even * s
    return out


def unrotate_rows(rows, cfg: RopeConfig, positions) -> np.ndarray:
    """Apply ``R(position)^T`` to each row (inverse of :func:`rotate_rows`)."""
    return rotate_rows(rows, cfg, -np.asarray(positions, dtype=np.float64))


def apply_rope_per_head(rows, cfg: RopeConfig, positions) -> np.ndarray:
    """Rotate per-head query or key rows ``(N, d_H)`` (or ``(n_H, N, d_H)``)."""
    return rotate_rows(rows, cfg, positions)


def latent_rope_scores(q_hat, k, cfg: RopeConfig, q_positions=None, k_positions=None) -> np.ndarray:
    """Position-aware scores in the latent key space.

    ``q_hat`` is ``(n_H, N_q, r3)`` and ``k`` is ``(N_k, r3)``. Entry
    ``(i, m, n)`` is ``q_hat[i, m] @ R(m) @ R(n)^T @ k[n]``, which only depends
    on ``m - n`` through the rotations. Unscaled.
    """
    q_hat = np.asarray(q_hat, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q_hat.ndim != 3 or k.ndim != 2 or q_hat.shape[2] != k.shape[1]:
        raise ValueError(f"incompatible shapes {q_hat.shape} and {k.shape}")
    if q_positions is None:
        q_positions = np.arange(q_hat.shape[1])
    if k_positions is None:
        k_positions = np.arange(k.shape[0])
    q_rot = rotate_rows(q_hat, cfg, q_positions)
    k_rot = rotate_rows(k, cfg, k_positions)
    return np.einsum("imc,nc->imn", q_rot, k_rot)


def latent_rope_scores_key_side(q_hat, k, cfg: RopeConfig, q_positions=None, k_positions=None) -> np.ndarray:
    """Same scores as :func:`latent_rope_scores` with both rotations on the key.

    Entry ``(i, m, n)`` is ``q_hat[i, m] . (k[n] R(n) R(m)^T)``, built from
    dense rotation matrices; quadratic in sequence length, meant as a check.
    """
    q_hat = np.asarray(q_hat, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    nq, nk = q_hat.shape[1], k.shape[0]
    q_positions = np.arange(nq) if q_positions is None else np.asarray(q_positions)
    k_positions = np.arange(nk) if k_positions is None else np.asarray(k_positions)
    out = np.empty((q_hat.shape[0], nq, nk))
    for a, m in enumerate(q_positions):
        rm = rope_matrix(cfg, m)
        for b, n in enumerate(k_positions):
            key = k[b] @ rope_matrix(cfg, n) @ rm.T
            out[:, a, b] = q_hat[:, a, :] @ key
    return out


def decoupled_rope_scores(q_sem, k_sem, x, wq_rot, wk_rot, cfg: RopeConfig, positions=None) -> np.ndarray:
    """Semantic plus rotational scores, unscaled.

    ``q_sem``/``k_sem`` are ``(n_H, N, d_s)`` semantic queries and keys,
    ``wq_rot``/``wk_rot`` are ``(n_H, d_model, d_r)`` rotational projections
    of ``x``. Head ``i`` gets
    ``q_sem_i k_sem_i^T + (X Wq_rot_i R(m)) (X Wk_rot_i R(n))^T``.
    A rotational width of zero gives the semantic scores alone.
    """
    q_sem = np.asarray(q_sem, dtype=np.float64)
    k_sem = np.asarray(k_sem, dtype=np.float64)
    scores = np.einsum("imc,inc->imn", q_sem, k_sem)
    if cfg.dim == 0:
        return scores
    x = np.asarray(x, dtype=np.float64)
    if positions is None:
        positions = np.arange(x.shape[0])
    q_rot = rotate_rows(np.einsum("nd,idr->inr", x, wq_rot), cfg, positions)
    k_rot = rotate_rows(np.einsum("nd,idr->inr", x, wk_rot), cfg, positions)
    return scores + np.einsum("imr,inr->imn", q_rot, k_rot)
