"""Dense double-precision linear algebra primitives.

Everything downstream (layer inversion, minimal perturbations, compression
operators) is built on the decompositions here.  Matrices are plain 2-D
float64 numpy arrays, validated finite on entry; decompositions are
deterministic for identical input bytes and carry a fixed sign convention
so emitted reports are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SvdConvergenceError

# Relative threshold for counting a singular value as nonzero.
RANK_RTOL = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a 2-D float64 array with finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size and not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def as_column(v, name: str = "vector") -> np.ndarray:
    """Accept a 1-D vector or single-column matrix; return shape (n, 1)."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[1] != 1:
        raise ValueError(f"{name} must be a single column, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SvdResult:
    """Reduced SVD a = u @ diag(sigma) @ vt.

    u has orthonormal columns, vt orthonormal rows, sigma is non-increasing
    and nonnegative.  rank counts singular values above RANK_RTOL * sigma[0].
    Sign convention: the first nonzero entry of each column of u is
    nonnegative.
    """

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray
    rank: int

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Flip (u_i, v_i) pairs so the first nonzero entry of u_i is >= 0.
    u = u.copy()
    vt = vt.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            vt[j, :] = -vt[j, :]
    return u, vt


def svd(a) -> SvdResult:
    """Reduced singular value decomposition with deterministic signs."""
    m = as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(f"SVD did not converge: {exc}") from exc
    u, vt = _fix_signs(u, vt)
    tol = RANK_RTOL * s[0] if s.size else 0.0
    rank = int(np.count_nonzero(s > tol))
    u.flags.writeable = False
    s.flags.writeable = False
    vt.flags.writeable = False
    return SvdResult(u=u, sigma=s, vt=vt, rank=rank)


def pinv(a) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD with the RANK_RTOL cutoff."""
    d = svd(a)
    r = d.rank
    if r == 0:
        return np.zeros((d.vt.shape[1], d.u.shape[0]))
    return (d.vt[:r].T / d.sigma[:r]) @ d.u[:, :r].T


@dataclass(frozen=True)
class TruncatedPinv:
    """Rank-k truncated pseudoinverse V_k diag(1/sigma_k) U_k^T.

    rank_used can fall below rank_requested when fewer singular values
    exceed the rank tolerance; ``truncated`` flags that case.
    """

    matrix: np.ndarray
    rank_requested: int
    rank_used: int

    @property
    def truncated(self) -> bool:
        return self.rank_used < self.rank_requested


def pinv_truncated(a, k: int) -> TruncatedPinv:
    """Pseudoinverse restricted to the top-k singular triplets."""
    m = as_matrix(a)
    if not 1 <= k <= min(m.shape):
        raise ValueError(f"k must be in [1, {min(m.shape)}], got {k}")
    d = svd(m)
    r = min(k, d.rank)
    if r == 0:
        mat = np.zeros((m.shape[1], m.shape[0]))
    else:
        mat = (d.vt[:r].T / d.sigma[:r]) @ d.u[:, :r].T
    return TruncatedPinv(matrix=mat, rank_requested=k, rank_used=r)


def low_rank_approx(a, k: int) -> np.ndarray:
    """Best Frobenius rank-k approximation (top-k singular triplets)."""
    m = as_matrix(a)
    if not 1 <= k <= min(m.shape):
        raise ValueError(f"k must be in [1, {min(m.shape)}], got {k}")
    d = svd(m)
    return (d.u[:, :k] * d.sigma[:k]) @ d.vt[:k]


def frobenius_norm(a) -> float:
    return float(np.linalg.norm(as_matrix(a), ord="fro"))


def spectral_norm(a) -> float:
    """Largest singular value."""
    d = svd(a)
    return float(d.sigma[0]) if d.sigma.size else 0.0


def vec_pnorm(v, p: float) -> float:
    """Entrywise l_p norm of a flattened array, p >= 1."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    flat = np.asarray(v, dtype=np.float64).ravel()
    if not np.all(np.isfinite(flat)):
        raise ValueError("vector contains non-finite entries")
    if np.isinf(p):
        return float(np.max(np.abs(flat))) if flat.size else 0.0
    return float(np.sum(np.abs(flat) ** p) ** (1.0 / p))


def effective_rank(a) -> int:
    """Number of singular values above RANK_RTOL * sigma_max."""
    return svd(a).rank
