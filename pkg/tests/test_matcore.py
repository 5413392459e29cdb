import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kendall.errors import InvalidInput, RankDeficient
from kendall.matcore import skew_sylvester_operator, solve_skew_sylvester, svd_square, sym_eig


def cubic_eigenvalues(S):
    """Closed-form eigenvalues of a symmetric 3x3 matrix (trigonometric roots
    of the characteristic polynomial), descending."""
    q = np.trace(S) / 3
    p1 = S[0, 1] ** 2 + S[0, 2] ** 2 + S[1, 2] ** 2
    p2 = sum((S[i, i] - q) ** 2 for i in range(3)) + 2 * p1
    p = math.sqrt(p2 / 6)
    B = (S - q * np.eye(3)) / p
    r = np.linalg.det(B) / 2
    phi = math.acos(min(1.0, max(-1.0, r))) / 3
    e1 = q + 2 * p * math.cos(phi)
    e3 = q + 2 * p * math.cos(phi + 2 * math.pi / 3)
    return np.array([e1, 3 * q - e1 - e3, e3])


def kron_sylvester(P, B):
    """Dense vectorised solve of ``A P + P A = B`` restricted to skew ``A``."""
    m = P.shape[0]
    I = np.eye(m)
    L = np.kron(P.T, I) + np.kron(I, P)
    # basis of skew matrices
    basis = []
    for i in range(m):
        for j in range(i + 1, m):
            E = np.zeros((m, m))
            E[i, j], E[j, i] = 1.0, -1.0
            basis.append(E.ravel(order="F"))
    Bm = np.array(basis).T
    coef, *_ = np.linalg.lstsq(L @ Bm, B.ravel(order="F"), rcond=None)
    return (Bm @ coef).reshape((m, m), order="F")


def test_sym_eig_identity_and_diagonal():
    e = sym_eig(np.eye(3))
    assert np.allclose(e.eigenvalues, 1)
    assert np.allclose(e.eigenvectors.T @ e.eigenvectors, np.eye(3), atol=1e-12)
    d = sym_eig(np.diag([1.0, 3.0, 2.0]))
    assert np.allclose(d.eigenvalues, [3, 2, 1])
    assert np.allclose(np.abs(d.eigenvectors), np.eye(3)[:, [1, 2, 0]])


def test_sym_eig_matches_cubic_roots(rng):
    for _ in range(50):
        A = rng.standard_normal((3, 3))
        S = A + A.T
        e = sym_eig(S)
        assert np.allclose(e.eigenvalues, cubic_eigenvalues(S), atol=1e-10)
        Q, D = e.eigenvectors, np.diag(e.eigenvalues)
        assert np.linalg.norm(Q @ D @ Q.T - S) <= 1e-12 * max(1, np.linalg.norm(S)) * 10
        assert np.allclose(Q.T @ Q, np.eye(3), atol=1e-12)


def test_sym_eig_rejects_nonfinite():
    with pytest.raises(InvalidInput):
        sym_eig(np.array([[np.nan, 0], [0, 1]]))
    with pytest.raises(InvalidInput):
        svd_square(np.ones((2, 3)))


def test_svd_square_signs():
    s = svd_square(np.eye(3))
    assert np.allclose(s.singular_values, 1) and s.det_sign == 1
    r = svd_square(np.diag([1.0, 1.0, -1.0]))
    assert np.allclose(r.singular_values, 1) and r.det_sign == -1
    z = svd_square(np.diag([1.0, 0.0, 2.0]))
    assert z.det_sign == 0


def test_svd_square_gram_oracle(rng):
    for _ in range(50):
        M = rng.standard_normal((3, 3))
        s = svd_square(M)
        assert np.linalg.norm(s.u @ np.diag(s.singular_values) @ s.v.T - M) <= 1e-12 * max(1, np.linalg.norm(M)) * 10
        assert np.all(np.diff(s.singular_values) <= 0)
        assert np.allclose(s.singular_values, np.sqrt(np.maximum(sym_eig(M.T @ M).eigenvalues, 0)), atol=1e-10)
        assert s.det_sign == np.sign(np.linalg.det(M))


def test_sylvester_trivial_cases(rng):
    P = rng.standard_normal((3, 3))
    P = P @ P.T
    assert np.allclose(solve_skew_sylvester(P, np.zeros((3, 3))), 0)
    B = rng.standard_normal((3, 3))
    B = B - B.T
    assert np.allclose(solve_skew_sylvester(np.eye(3), B), B / 2)


def test_sylvester_matches_vectorised_oracle(rng):
    for m in (2, 3, 4):
        for _ in range(20):
            X = rng.standard_normal((m, m + 2))
            P = X @ X.T
            B = rng.standard_normal((m, m))
            B = B - B.T
            A = solve_skew_sylvester(P, B)
            assert np.array_equal(A, -A.T)
            assert np.linalg.norm(A @ P + P @ A - B) <= 1e-10 * max(1, np.linalg.norm(B))
            assert np.allclose(A, kron_sylvester(P, B), atol=1e-10)


def test_sylvester_one_zero_eigenvalue_is_allowed(rng):
    x = rng.standard_normal((3, 2))  # rank 2 = m - 1
    P = x @ x.T
    B = rng.standard_normal((3, 3))
    B = B - B.T
    A = solve_skew_sylvester(P, B)
    assert np.linalg.norm(A @ P + P @ A - B) < 1e-9


def test_sylvester_rank_deficient(rng):
    x = rng.standard_normal((3, 1))  # rank 1 < m - 1
    with pytest.raises(RankDeficient):
        solve_skew_sylvester(x @ x.T, np.zeros((3, 3)))


def test_operator_matches_direct(rng):
    X = rng.standard_normal((3, 6))
    P = X @ X.T
    solve = skew_sylvester_operator(P)
    Bs = rng.standard_normal((4, 3, 3))
    Bs = Bs - np.swapaxes(Bs, 1, 2)
    out = solve(Bs)
    for B, A in zip(Bs, out):
        assert np.allclose(A, solve_skew_sylvester(P, B), atol=1e-12)


@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_sylvester_residual_property(m, seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((m, m + 3))
    P = X @ X.T
    B = r.standard_normal((m, m))
    B = B - B.T
    A = solve_skew_sylvester(P, B)
    assert np.array_equal(A + A.T, np.zeros((m, m)))
    assert np.linalg.norm(A @ P + P @ A - B) <= 1e-9 * max(1, np.linalg.norm(B)) * np.linalg.cond(P)
