"""Dense m x m kernels: symmetric eigendecomposition, square SVD and the
skew-symmetric Sylvester solver used for vertical projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, RankDeficient

RANK_RTOL = 1e-10


@dataclass(frozen=True)
class SymEig:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns


@dataclass(frozen=True)
class SquareSvd:
    u: np.ndarray
    singular_values: np.ndarray  # descending, nonnegative
    v: np.ndarray
    det_sign: int


def _check_square(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidInput(f"{name} must be a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInput(f"{name} has non-finite entries")
    return M


def sym_eig(S) -> SymEig:
    S = _check_square(S, "S")
    S = 0.5 * (S + S.T)
    w, Q = np.linalg.eigh(S)
    return SymEig(w[::-1].copy(), Q[:, ::-1].copy())


def svd_square(M) -> SquareSvd:
    """SVD ``M = U diag(s) V^t`` together with the sign of ``det M``."""
    M = _check_square(M, "M")
    U, s, Vt = np.linalg.svd(M)
    V = Vt.T
    if s.size == 0 or s[-1] == 0.0:
        det_sign = 0
    else:
        det_sign = int(np.sign(np.linalg.det(U) * np.linalg.det(V)))
    return SquareSvd(U, s, V, det_sign)


def solve_skew_sylvester(P, B, rank_tol=None):
    """Skew-symmetric ``A`` with ``A P + P A = B``.

    ``P`` is symmetric, ``B`` skew.  The equation is diagonal in the
    eigenbasis of ``P``: ``A_ij = B_ij / (d_i + d_j)`` off the diagonal, and
    the diagonal of a skew matrix vanishes.  A unique solution exists as long
    as all pairwise eigenvalue sums are positive, which for PSD ``P`` means at
    most one eigenvalue is (numerically) zero.
    """
    P = _check_square(P, "P")
    B = _check_square(B, "B")
    m = P.shape[0]
    if m == 1:
        return np.zeros((1, 1))
    w, Q = np.linalg.eigh(0.5 * (P + P.T))
    if rank_tol is None:
        rank_tol = RANK_RTOL * max(np.abs(w).max(), np.finfo(float).tiny)
    # eigh returns ascending order
    if np.count_nonzero(w <= rank_tol) >= 2 or w[0] + w[1] <= rank_tol:
        raise RankDeficient(
            f"Sylvester operator is singular (eigenvalues {w}, tol {rank_tol:.3g})"
        )
    Bh = Q.T @ (0.5 * (B - B.T)) @ Q
    denom = w[:, None] + w[None, :]
    np.fill_diagonal(denom, 1.0)
    Ah = Bh / denom
    np.fill_diagonal(Ah, 0.0)
    A = Q @ Ah @ Q.T
    return 0.5 * (A - A.T)


def skew_sylvester_operator(P):
    """Precompute the eigenbasis of ``P`` for repeated solves.

    Returns a function ``B -> A`` equivalent to ``solve_skew_sylvester(P, B)``
    that also accepts stacks of right-hand sides with shape ``(..., m, m)``.
    """
    P = _check_square(P, "P")
    m = P.shape[0]
    w, Q = np.linalg.eigh(0.5 * (P + P.T))
    rank_tol = RANK_RTOL * max(np.abs(w).max(), np.finfo(float).tiny)
    if m > 1 and (np.count_nonzero(w <= rank_tol) >= 2 or w[0] + w[1] <= rank_tol):
        raise RankDeficient(f"Sylvester operator is singular (eigenvalues {w})")
    denom = w[:, None] + w[None, :]
    np.fill_diagonal(denom, np.inf)

    def solve(B):
        Bh = Q.T @ B @ Q
        return Q @ (Bh / denom) @ Q.T

    return solve
