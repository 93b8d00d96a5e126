import numpy as np
import pytest
from hypothesis import given, strategies as st

from layerwise.errors import DimensionMismatch, NonFinite, NotPositiveDefinite, NotSymmetric
from layerwise.linalg import (
    cholesky_solve,
    cholesky_upper,
    min_eigenvalue,
    record_factorizations,
    solve_spd,
    spectral_norm,
    symmetrized,
)


def jacobi_eigenvalues(a, sweeps=100):
    """Cyclic Jacobi rotations; independent of LAPACK's symmetric eigensolver."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < 1e-15 * np.linalg.norm(a):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t ** 2 + 1)
                s = t * c
                R = np.eye(n)
                R[p, p] = R[q, q] = c
                R[p, q] = s
                R[q, p] = -s
                a = R.T @ a @ R
    return np.sort(np.diag(a))


def spd_from(seed, n, floor=1e-1):
    r = np.random.default_rng(seed)
    A = r.normal(size=(n, n))
    return A @ A.T + floor * np.eye(n)


def test_cholesky_identity():
    np.testing.assert_array_equal(cholesky_upper(np.eye(3)), np.eye(3))


def test_cholesky_two_by_two_reconstructs():
    m = np.array([[4.0, 2.0], [2.0, 3.0]])
    L = cholesky_upper(m)
    assert np.allclose(np.tril(L, -1), 0)
    assert np.all(np.diag(L) > 0)
    assert np.max(np.abs(L.T @ L - m)) <= 1e-12


def test_cholesky_indefinite_rejected():
    with pytest.raises(NotPositiveDefinite):
        cholesky_upper([[1.0, 2.0], [2.0, 1.0]])


def test_input_validation():
    with pytest.raises(NotSymmetric):
        cholesky_upper([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(NonFinite):
        cholesky_upper([[np.nan, 0.0], [0.0, 1.0]])
    with pytest.raises(DimensionMismatch):
        cholesky_upper(np.ones((2, 3)))
    with pytest.raises(DimensionMismatch):
        cholesky_solve(np.eye(2), np.ones(3))


def test_tiny_asymmetry_is_symmetrized():
    m = np.array([[2.0, 1.0], [1.0 + 1e-14, 2.0]])
    s = symmetrized(m)
    assert np.array_equal(s, s.T)
    cholesky_upper(m)


def test_solve_examples():
    np.testing.assert_allclose(solve_spd(np.eye(2), [3.0, 4.0]), [3.0, 4.0])
    np.testing.assert_allclose(solve_spd(np.diag([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0])


def test_solve_random_8x8(rng):
    m = spd_from(1, 8)
    b = rng.normal(size=8)
    x = solve_spd(m, b)
    assert np.linalg.norm(m @ x - b) / np.linalg.norm(b) <= 1e-10


def test_solve_matrix_rhs(rng):
    m = spd_from(2, 5)
    B = rng.normal(size=(5, 3))
    np.testing.assert_allclose(m @ solve_spd(m, B), B, atol=1e-10)


def test_min_eigenvalue_examples():
    assert min_eigenvalue(np.eye(4)) == pytest.approx(1.0, abs=1e-15)
    assert min_eigenvalue(np.diag([0.5, 3.0])) == pytest.approx(0.5, abs=1e-15)


def test_min_eigenvalue_matches_jacobi_oracle(rng):
    for _ in range(5):
        A = rng.normal(size=(6, 6))
        m = A + A.T
        oracle = jacobi_eigenvalues(m)[0]
        assert abs(min_eigenvalue(m) - oracle) <= 1e-8 * max(1.0, np.linalg.norm(m))


def test_spectral_norm():
    assert spectral_norm(np.diag([3.0, -5.0])) == pytest.approx(5.0)
    assert spectral_norm(np.zeros((2, 0))) == 0.0


def test_factorization_recorder():
    with record_factorizations() as dims:
        cholesky_upper(np.eye(3))
        solve_spd(np.eye(2), np.ones(2))
    assert dims == [3, 2]
    cholesky_upper(np.eye(4))
    assert dims == [3, 2]


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 24), floor=st.sampled_from([1e-3, 1e-1, 10.0]))
def test_reconstruction_property(seed, n, floor):
    m = spd_from(seed, n, floor)
    L = cholesky_upper(m)
    assert np.linalg.norm(L.T @ L - m) <= 1e-12 * np.linalg.norm(m)


def test_solve_residual_contract_1000_instances():
    r = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        n = int(r.integers(1, 65))
        A = r.normal(size=(n, n))
        m = A @ A.T / n + 0.5 * np.eye(n)
        b = r.normal(size=n)
        x = solve_spd(m, b)
        worst = max(worst, np.linalg.norm(m @ x - b) / (np.linalg.norm(m, 2) * np.linalg.norm(x) + np.linalg.norm(b)))
    assert worst <= 1e-12


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 10), c=st.floats(-50, 50))
def test_shift_property(seed, n, c):
    r = np.random.default_rng(seed)
    A = r.normal(size=(n, n))
    m = A + A.T
    assert min_eigenvalue(m + c * np.eye(n)) == pytest.approx(min_eigenvalue(m) + c, abs=1e-8)
