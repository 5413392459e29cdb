"""Population statistics in shape space.

Fréchet mean (Newton on Karcher's equation), total variance, tangent PCA,
group means of transported velocities and vertex-wise two-sample Hotelling
T^2 tests with Benjamini-Hochberg control.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import GroupTooSmall, InvalidInput, KendallError, NonConvergence
from .preshape import sphere_exp, to_landmarks
from .shape import horizontal, omega, shape_dist, shape_exp, shape_log

FD_STEP = 1e-6
NEWTON_MAX_DIM = 200


@dataclass(frozen=True)
class FrechetResult:
    mean: np.ndarray
    total_variance: float
    iterations: int
    final_residual: float
    method: str = "newton"


def _karcher_field(x, shapes):
    return sum(shape_log(x, q) for q in shapes)


def horizontal_basis(x):
    """Orthonormal basis of the horizontal space at ``x`` (rows, flattened).

    Coordinate directions are projected onto the horizontal space and
    orthonormalised; the result has ``m(k-1) - m(m-1)/2 - 1`` rows.
    """
    x = np.asarray(x)
    m, n = x.shape
    dim = m * n - m * (m - 1) // 2 - 1
    E = np.eye(m * n).reshape(m * n, m, n)
    proj = np.stack([horizontal(x, e) for e in E]).reshape(m * n, m * n)
    # the projector is symmetric; its top eigenvectors span the horizontal space
    w, V = np.linalg.eigh(0.5 * (proj + proj.T))
    return V[:, -dim:].T.copy()


def frechet_mean(shapes, tol=1e-10, max_iters=100, method="auto", init=None) -> FrechetResult:
    """Fréchet mean: solves ``sum_i Log_x q_i = 0``.

    ``method="newton"`` uses a finite-difference Jacobian of the Karcher
    field over an orthonormal horizontal basis; ``"fixed_point"`` takes the
    step ``Exp_x(f(x) / N)``.  ``"auto"`` picks Newton while the shape-space
    dimension is at most 200.  Newton falls back to the fixed-point step
    whenever its step does not reduce ``|f|``.
    """
    shapes = [np.asarray(q, dtype=float) for q in shapes]
    if not shapes:
        raise InvalidInput("need at least one shape")
    N = len(shapes)
    q0 = shapes[0]
    m, n = q0.shape
    dim = m * n - m * (m - 1) // 2 - 1
    if method == "auto":
        method = "newton" if dim <= NEWTON_MAX_DIM else "fixed_point"
    if method not in ("newton", "fixed_point"):
        raise InvalidInput(f"unknown method {method!r}")
    if init is None:
        # normalised Euclidean mean of the shapes aligned to the first one
        x = sum(omega(q0, q) for q in shapes)
        x = x / np.linalg.norm(x) if np.linalg.norm(x) > 0 else q0.copy()
    else:
        x = np.asarray(init, dtype=float)
    f = _karcher_field(x, shapes)
    res = float(np.linalg.norm(f))
    best = (res, x)
    it = 0
    while res >= tol and it < max_iters:
        it += 1
        x_new = None
        if method == "newton":
            try:
                x_new = _newton_step(x, f, shapes)
            except (np.linalg.LinAlgError, KendallError):
                x_new = None
            if x_new is not None:
                f_new = _karcher_field(x_new, shapes)
                if np.linalg.norm(f_new) >= res:
                    x_new = None
        if x_new is None:
            x_new = shape_exp(x, f / N)
            f_new = _karcher_field(x_new, shapes)
        x, f = x_new, f_new
        res = float(np.linalg.norm(f))
        if res < best[0]:
            best = (res, x)
    if res >= tol:
        raise NonConvergence(f"Fréchet mean: |sum Log| = {res:.3g} after {it} iterations", best=best[1])
    return FrechetResult(x, total_variance(shapes, x), it, res, method)


def _newton_step(x, f, shapes):
    B = horizontal_basis(x)
    shape = x.shape
    cols = []
    for b in B:
        e = b.reshape(shape)
        fp = _karcher_field(sphere_exp(x, FD_STEP * e), shapes)
        fm = _karcher_field(sphere_exp(x, -FD_STEP * e), shapes)
        # fields at nearby points compared in coordinates of the basis at x
        cols.append(B @ ((fp - fm).ravel() / (2 * FD_STEP)))
    Jm = np.array(cols).T
    rhs = B @ f.ravel()
    step = np.linalg.solve(Jm, -rhs)
    return sphere_exp(x, (B.T @ step).reshape(shape))


def total_variance(shapes, mean) -> float:
    """``(1/N) sum_i |Log_mean q_i|^2``."""
    shapes = list(shapes)
    return float(sum(np.vdot(w, w) for w in (shape_log(mean, q) for q in shapes)) / len(shapes))


def sum_squared_distances(x, shapes) -> float:
    """``G(x) = sum_i d^2(x, q_i)``."""
    return float(sum(shape_dist(x, q) ** 2 for q in shapes))


@dataclass(frozen=True)
class TangentPCA:
    components: np.ndarray  # r x m x (k-1), r = min(rank, n_components)
    scores: np.ndarray  # N x r
    explained: np.ndarray  # n_components fractions, zero beyond rank
    mean_log: np.ndarray


def tangent_pca(shapes, ref, n_components) -> TangentPCA:
    """PCA of the centered ``Log_ref q_i`` vectors.

    Only components with nonzero variance are returned; ``explained`` is
    padded with zeros up to ``n_components``.
    """
    if n_components < 1:
        raise InvalidInput("n_components must be positive")
    ref = np.asarray(ref, dtype=float)
    L = np.stack([shape_log(ref, q) for q in shapes])
    mean_log = L.mean(axis=0)
    X = (L - mean_log).reshape(len(L), -1)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    total = float(np.sum(s**2))
    rank = int(np.count_nonzero(s > 1e-12 * max(s[0] if s.size else 0.0, 1e-300)))
    r = min(rank, n_components)
    explained = np.zeros(n_components)
    if total > 0:
        explained[:r] = s[:r] ** 2 / total
    comps = Vt[:r].reshape((r,) + ref.shape)
    scores = U[:, :r] * s[:r]
    return TangentPCA(comps, scores, explained, mean_log)


def group_mean_velocity(velocities, ref):
    """Average of tangent vectors at ``ref``, projected onto the horizontal space."""
    velocities = list(velocities)
    if not velocities:
        raise InvalidInput("need at least one velocity")
    return horizontal(ref, np.mean(np.stack(velocities), axis=0))


def velocity_displacements(v, size_scale=1.0):
    """Per-landmark ``k x m`` displacement field of a tangent vector."""
    return to_landmarks(v, size_scale)


@dataclass(frozen=True)
class GroupTestResult:
    per_vertex_t2: np.ndarray
    per_vertex_p: np.ndarray
    rejected: np.ndarray
    effect_magnitude: np.ndarray
    singular: np.ndarray
    q: float


def bh_fdr(p_values, q):
    """Benjamini-Hochberg step-up: reject the largest prefix of sorted p with
    ``p_(i) <= i q / k``."""
    p = np.asarray(p_values, dtype=float)
    if not 0 < q < 1:
        raise InvalidInput("q must lie in (0, 1)")
    k = p.size
    if k == 0:
        return np.zeros(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    ok = p[order] <= q * np.arange(1, k + 1) / k
    mask = np.zeros(k, dtype=bool)
    if ok.any():
        last = int(np.nonzero(ok)[0].max())
        mask[order[: last + 1]] = True
    return mask


def hotelling_t2(group_a, group_b, q=0.01, rcond=1e-12) -> GroupTestResult:
    """Vertex-wise two-sample Hotelling T^2 with pooled covariance.

    ``group_a`` and ``group_b`` are stacks of ``k x m`` displacement fields.
    ``F = T^2 (n - m - 1) / ((n - 2) m)`` with ``n = n_a + n_b`` is referred
    to ``F(m, n - m - 1)``.  Vertices with a singular pooled covariance get
    ``p = 1`` and are flagged.
    """
    A = np.asarray(group_a, dtype=float)
    B = np.asarray(group_b, dtype=float)
    if A.ndim != 3 or B.ndim != 3 or A.shape[1:] != B.shape[1:]:
        raise InvalidInput("groups must be stacks of k x m displacement fields of equal shape")
    na, nb = A.shape[0], B.shape[0]
    k, m = A.shape[1:]
    if min(na, nb) < m + 2:
        raise GroupTooSmall(f"each group needs at least m+2 = {m + 2} subjects, got {na} and {nb}")
    n = na + nb
    ma, mb = A.mean(axis=0), B.mean(axis=0)
    diff = ma - mb  # k x m
    Ca = np.einsum("skj,skl->kjl", A - ma, A - ma)
    Cb = np.einsum("skj,skl->kjl", B - mb, B - mb)
    S = (Ca + Cb) / (n - 2)  # k x m x m
    w, V = np.linalg.eigh(S)
    scale = np.maximum(np.abs(w).max(axis=1), 1e-300)
    singular = (w[:, 0] <= rcond * scale) | (np.abs(w).max(axis=1) == 0)
    t2 = np.zeros(k)
    ok = ~singular
    if ok.any():
        z = np.einsum("kji,kj->ki", V[ok], diff[ok])
        t2[ok] = (na * nb / n) * np.sum(z * z / w[ok], axis=1)
    d2 = n - m - 1
    F = t2 * d2 / ((n - 2) * m)
    p = np.where(ok, sps.f.sf(F, m, d2), 1.0)
    p = np.clip(p, 0.0, 1.0)
    if singular.any():
        warnings.warn(f"{int(singular.sum())} vertices have singular pooled covariance; p set to 1",
                      RuntimeWarning, stacklevel=2)
    return GroupTestResult(t2, p, bh_fdr(p, q), np.linalg.norm(diff, axis=1), singular, q)


__all__ = [
    "FrechetResult",
    "frechet_mean",
    "total_variance",
    "sum_squared_distances",
    "horizontal_basis",
    "TangentPCA",
    "tangent_pca",
    "group_mean_velocity",
    "velocity_displacements",
    "GroupTestResult",
    "hotelling_t2",
    "bh_fdr",
]
