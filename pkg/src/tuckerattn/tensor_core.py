"""Dense order-3 tensor primitives.

Matrices and tensors are plain float64 ``numpy`` arrays. Matricization follows
the Kolda & Bader convention: the mode-``j`` fibers become columns and the
remaining indices are laid out with the lower-numbered mode varying fastest.
Modes are numbered 1, 2, 3 throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_RANK_TOL = 1e-8


def _check_mode(mode: int) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    return mode - 1


def _as_tensor3(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"expected an order-3 tensor, got shape {t.shape}")
    return t


def matricize(t, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding of an order-3 tensor.

    For ``t`` of shape ``(I1, I2, I3)`` and ``mode=2`` the result has shape
    ``(I2, I1*I3)`` and entry ``(i2, i1 + I1*i3)`` equals ``t[i1, i2, i3]``.
    """
    axis = _check_mode(mode)
    t = _as_tensor3(t)
    return np.moveaxis(t, axis, 0).reshape(t.shape[axis], -1, order="F")


def fold(m, mode: int, dims) -> np.ndarray:
    """Inverse of :func:`matricize` for a tensor of shape ``dims``."""
    axis = _check_mode(mode)
    dims = tuple(int(d) for d in dims)
    rest = tuple(d for k, d in enumerate(dims) if k != axis)
    full = np.asarray(m, dtype=np.float64).reshape((dims[axis],) + rest, order="F")
    return np.moveaxis(full, 0, axis)


def mode_product(t, m, mode: int) -> np.ndarray:
    """n-mode product ``t x_mode m``.

    ``m`` has shape ``(J, I_mode)``; the result replaces dimension ``mode`` by
    ``J`` and satisfies ``matricize(result, mode) == m @ matricize(t, mode)``.
    """
    axis = _check_mode(mode)
    t = _as_tensor3(t)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != t.shape[axis]:
        raise ValueError(
            f"matrix of shape {m.shape} cannot act on mode {mode} of tensor {t.shape}"
        )
    out = np.tensordot(m, t, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def multi_mode_product(t, matrices) -> np.ndarray:
    """Apply one matrix per mode; ``None`` entries are skipped."""
    out = _as_tensor3(t)
    for mode, m in enumerate(matrices, start=1):
        if m is not None:
            out = mode_product(out, m, mode)
    return out


def _check_finite(m: np.ndarray) -> None:
    if not np.all(np.isfinite(m)):
        raise ValueError("input contains non-finite entries")


def svd(m):
    """Thin SVD ``m = U diag(s) V^T`` with a deterministic sign convention.

    Each left singular vector is flipped so that its entry of largest
    magnitude is nonnegative; the matching right vector is flipped with it.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    _check_finite(m)
    if m.size == 0:
        k = min(m.shape)
        return np.zeros((m.shape[0], k)), np.zeros(k), np.zeros((m.shape[1], k))
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = u * signs
    v = vt.T * signs
    return u, s, v


def truncated_svd(m, r: int):
    """Best rank-``r`` factors ``(U_r, s_r, V_r)`` of ``m``."""
    m = np.asarray(m, dtype=np.float64)
    if not 1 <= r <= min(m.shape):
        raise ValueError(f"rank {r} out of range for matrix of shape {m.shape}")
    u, s, v = svd(m)
    return u[:, :r], s[:r], v[:, :r]


def numerical_rank(m, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``tol * s_max`` (0 for a zero matrix)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    _, s, _ = svd(m)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


@dataclass
class TuckerFactors3:
    core: np.ndarray
    factors: tuple

    @property
    def ranks(self) -> tuple:
        return tuple(self.core.shape)

    def reconstruct(self) -> np.ndarray:
        return multi_mode_product(self.core, self.factors)


def hosvd(t, ranks) -> TuckerFactors3:
    """Truncated higher-order SVD.

    Factor ``j`` holds the leading ``ranks[j]`` left singular vectors of the
    mode-``j`` unfolding; the core is ``t`` projected onto those bases.
    """
    t = _as_tensor3(t)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != 3:
        raise ValueError("ranks must have three entries")
    for j, (r, dim) in enumerate(zip(ranks, t.shape), start=1):
        if not 1 <= r <= dim:
            raise ValueError(f"rank {r} out of range for mode {j} of size {dim}")
    factors = []
    for j, r in enumerate(ranks, start=1):
        u, _, _ = svd(matricize(t, j))
        # a rank-deficient unfolding still yields orthonormal columns from LAPACK
        factors.append(u[:, :r])
    core = multi_mode_product(t, [u.T for u in factors])
    return TuckerFactors3(core=core, factors=tuple(factors))


def relative_error(approx, exact) -> float:
    """Frobenius ``||approx - exact|| / ||exact||`` (absolute when exact is zero)."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = np.linalg.norm(exact)
    diff = np.linalg.norm(approx - exact)
    return float(diff / denom) if denom > 0 else float(diff)
