"""Dense SPD kernels: Cholesky, inversion, and power-iteration PCA.

All routines work on float64 numpy arrays and never regularize on their own;
a matrix that is not positive definite raises :class:`NotPositiveDefinite`
so the caller can decide how much dampening to add.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotPositiveDefinite, ShapeMismatch, ValidationError

SYMMETRY_TOL = 1e-9


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name} has non-finite entries")
    return m


def _check_symmetric(a: np.ndarray) -> None:
    if a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise ValidationError("matrix is not symmetric")


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def upper(self) -> np.ndarray:
        return self.lower.T


def cholesky(a) -> CholeskyFactor:
    """Lower-triangular L with L @ L.T == a."""
    a = as_matrix(a)
    _check_symmetric(a)
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("non-positive pivot in Cholesky factorization") from exc
    d = np.diag(lower)
    if not (np.all(np.isfinite(lower)) and np.all(d > 0)):
        raise NotPositiveDefinite("non-positive pivot in Cholesky factorization")
    return CholeskyFactor(lower)


def inverse_spd(a) -> np.ndarray:
    """Inverse of an SPD matrix via Cholesky and two triangular solves."""
    lower = cholesky(a).lower
    n = lower.shape[0]
    y = solve_triangular(lower, np.eye(n), lower=True)
    inv = solve_triangular(lower.T, y, lower=False)
    return (inv + inv.T) / 2.0


def top_principal_components(
    a, k: int, iters: int = 1000, seed: int = 0, tol: float = 1e-13
) -> np.ndarray:
    """Leading ``k`` eigenvectors of a PSD matrix as columns (dim x k).

    Power iteration with Hotelling deflation; every iterate is re-orthogonalized
    against the components already found.
    """
    a = as_matrix(a)
    _check_symmetric(a)
    dim = a.shape[0]
    if not 1 <= k <= dim:
        raise ValidationError(f"k must be in [1, {dim}], got {k}")
    if iters < 1:
        raise ValidationError("iters must be >= 1")

    rng = np.random.default_rng(seed)
    work = a.copy()
    basis = np.zeros((dim, k))

    def orthonormalize(v: np.ndarray, j: int) -> np.ndarray:
        for _ in range(2):
            v = v - basis[:, :j] @ (basis[:, :j].T @ v)
        return v / np.linalg.norm(v)

    for j in range(k):
        v = orthonormalize(rng.standard_normal(dim), j)
        for _ in range(iters):
            nxt = work @ v
            if np.linalg.norm(nxt) == 0.0:
                # deflated operator vanishes on this subspace; any unit vector is an eigenvector
                break
            nxt = orthonormalize(nxt, j)
            if nxt @ v < 0:
                nxt = -nxt
            done = np.linalg.norm(nxt - v) < tol
            v = nxt
            if done:
                break
        basis[:, j] = v
        lam = float(v @ a @ v)
        work = work - lam * np.outer(v, v)
    return basis
