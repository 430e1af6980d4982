"""Dense matrix/vector helpers: SVD pseudoinverse and p-norms.

Everything operates on float64 numpy arrays. Matrices are 2-D row-major
arrays, vectors 1-D arrays; the validators below reject NaN/Inf entries at
construction boundaries so downstream feasibility checks never see them.
"""

from __future__ import annotations

import numpy as np

# Singular values sigma_i with sigma_i <= DEFAULT_RANK_TOL * sigma_max are
# treated as zero.  Rank decisions determine which null space exists, so this
# stays configurable everywhere a pseudoinverse is formed.
DEFAULT_RANK_TOL = 1e-10


class SvdConvergenceError(RuntimeError):
    """SVD failed to converge; carries the offending matrix dimensions."""

    def __init__(self, rows: int, cols: int):
        super().__init__(f"SVD did not converge on a {rows}x{cols} matrix")
        self.rows = rows
        self.cols = cols


def as_matrix(a) -> np.ndarray:
    """Validate and return `a` as a finite float64 2-D array."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError("matrix entries must be finite")
    return out


def as_vector(v) -> np.ndarray:
    """Validate and return `v` as a finite float64 1-D array."""
    out = np.asarray(v, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError("vector entries must be finite")
    return out


def _svd(a: np.ndarray):
    try:
        return np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(a.shape[-2], a.shape[-1]) from exc


def pinv(a, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD with a relative rank cutoff.

    Singular values sigma_i <= rank_tol * sigma_max are zeroed.  The result
    satisfies the four Penrose identities to numerical precision.
    """
    a = as_matrix(a)
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    if a.size == 0:
        return np.zeros((a.shape[1], a.shape[0]))
    u, s, vt = _svd(a)
    cutoff = rank_tol * (s[0] if s.size else 0.0)
    inv_s = np.where(s > cutoff, np.divide(1.0, s, where=s > 0), 0.0)
    return (vt.T * inv_s) @ u.T


def pinv_stack(a: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Batched pseudoinverse for a (..., k, n) stack of matrices.

    Uses one gufunc SVD call for the whole stack; the rank cutoff is relative
    to each matrix's own largest singular value.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise ValueError("pinv_stack expects at least a 2-D array")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(a.shape[-2], a.shape[-1]) from exc
    cutoff = rank_tol * s.max(axis=-1, keepdims=True)
    inv_s = np.where(s > cutoff, np.divide(1.0, s, where=s > 0), 0.0)
    return np.einsum("...nk,...k,...mk->...nm", np.swapaxes(vt, -1, -2), inv_s, u)


def vec_pnorm(v, p: float) -> float:
    """(sum_i |v_i|^p)^(1/p) for p >= 1."""
    v = as_vector(v)
    if p < 1:
        raise ValueError("p-norms require p >= 1")
    if v.size == 0:
        return 0.0
    return float(np.linalg.norm(v, ord=p))


def spectral_norm(a) -> float:
    """Largest singular value of `a`."""
    a = as_matrix(a)
    if a.size == 0:
        return 0.0
    _, s, _ = _svd(a)
    return float(s[0])
