"""Dense linear algebra kernels.

All routines work in float64. Factorizations follow the convention
``M = L.T @ L`` with ``L`` upper triangular.
"""
from __future__ import annotations

import contextlib
import contextvars

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonFinite, NotPositiveDefinite, NotSymmetric

SYMMETRY_RTOL = 1e-10

_factorization_log: contextvars.ContextVar[list | None] = contextvars.ContextVar(
    "_factorization_log", default=None
)


@contextlib.contextmanager
def record_factorizations():
    """Collect the dimension of every Cholesky factorization done inside the block.

    >>> with record_factorizations() as dims:
    ...     _ = cholesky_upper(np.eye(3))
    >>> dims
    [3]
    """
    dims: list[int] = []
    token = _factorization_log.set(dims)
    try:
        yield dims
    finally:
        _factorization_log.reset(token)


def _as_square(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite("matrix has non-finite entries")
    return m


def symmetrized(m) -> np.ndarray:
    """Return ``(m + m.T) / 2``, refusing inputs that are far from symmetric."""
    m = _as_square(m)
    scale = np.linalg.norm(m)
    asym = np.linalg.norm(m - m.T)
    if asym > SYMMETRY_RTOL * scale:
        raise NotSymmetric(f"asymmetry {asym:.3e} exceeds {SYMMETRY_RTOL:.0e} * |m| = {scale:.3e}")
    return 0.5 * (m + m.T)


def cholesky_upper(m) -> np.ndarray:
    """Upper triangular ``L`` with positive diagonal such that ``L.T @ L == m``."""
    m = symmetrized(m)
    log = _factorization_log.get()
    if log is not None:
        log.append(m.shape[0])
    try:
        lower = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    upper = lower.T.copy()
    if not np.all(np.diag(upper) > 0):
        raise NotPositiveDefinite("non-positive pivot")
    return upper


def cholesky_solve(upper: np.ndarray, rhs) -> np.ndarray:
    """Solve ``(U.T @ U) x = rhs`` given the upper factor ``U``; rhs may be a matrix."""
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != upper.shape[0]:
        raise DimensionMismatch(f"rhs has {rhs.shape[0]} rows, factor has {upper.shape[0]}")
    z = solve_triangular(upper, rhs, trans="T", lower=False, check_finite=False)
    return solve_triangular(upper, z, lower=False, check_finite=False)


def solve_spd(m, rhs) -> np.ndarray:
    return cholesky_solve(cholesky_upper(m), rhs)


def min_eigenvalue(m) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    m = symmetrized(m)
    if m.shape[0] == 0:
        raise DimensionMismatch("empty matrix has no eigenvalues")
    return float(np.linalg.eigvalsh(m)[0])


def spectral_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(m, 2))
