"""Quotient geometry of Kendall's shape space.

Shapes are SO(m)-orbits of pre-shapes.  Everything here works on
representatives: distances via pseudo-singular values, the optimal rotation
(well-positioning), the horizontal/vertical split of tangent vectors, and the
shape-space Log/Exp built on top of them.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NonUniqueRotation, RankDeficient, SingularStratum
from .matcore import RANK_RTOL, solve_skew_sylvester, svd_square
from .preshape import sphere_dist, sphere_exp, sphere_log

TOL_UNIQUE = 1e-8


@dataclass(frozen=True)
class PseudoSingularValues:
    lambdas: np.ndarray  # lambda_1 >= ... >= lambda_{m-1} >= |lambda_m|

    @property
    def total(self):
        return float(np.clip(self.lambdas.sum(), -1.0, 1.0))


@dataclass(frozen=True)
class WellPositionedPair:
    x: np.ndarray
    y: np.ndarray
    rotation: np.ndarray


@dataclass(frozen=True)
class HorizontalVertical:
    horizontal: np.ndarray
    vertical: np.ndarray
    skew: np.ndarray
    radial: float


def rank_ok(x) -> bool:
    """True when ``rank(x) >= m - 1`` (the regular part of shape space)."""
    x = np.asarray(x)
    w = np.linalg.eigvalsh(x @ x.T)
    tol = RANK_RTOL * max(w[-1], np.finfo(float).tiny)
    return np.count_nonzero(w <= tol) <= 1


def check_regular(x, what="pre-shape"):
    if not rank_ok(x):
        raise SingularStratum(f"{what} has rank below m - 1")


def pseudo_singular_values(x, y) -> PseudoSingularValues:
    svd = svd_square(np.asarray(y) @ np.asarray(x).T)
    lam = svd.singular_values.copy()
    if svd.det_sign < 0:
        lam[-1] = -lam[-1]
    return PseudoSingularValues(lam)


def shape_dist(x, y) -> float:
    """``arccos(sum of pseudo-singular values)``.

    Near zero the arccos loses half the digits, so small distances are
    taken as the sphere distance of the aligned pair instead (same value,
    full precision).
    """
    total = pseudo_singular_values(x, y).total
    if total > 1.0 - 1e-4:
        return sphere_dist(x, omega(x, y))
    return float(np.arccos(total))


def optimal_rotation(x, y, tol_unique=TOL_UNIQUE):
    """Rotation ``R`` in SO(m) with ``R y`` well positioned to ``x``.

    With ``y x^t = U S V^t``, ``R = V diag(1, ..., 1, s) U^t`` where ``s`` is
    the sign of ``det(V U^t)``; then ``R y x^t = V diag(..., s*sigma_m) V^t``.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    svd = svd_square(y @ x.T)
    U, s, V = svd.u, svd.singular_values, svd.v
    m = s.size
    sign = 1.0 if np.linalg.det(V @ U.T) > 0 else -1.0
    if m >= 2 and s[-2] + sign * s[-1] <= tol_unique:
        raise NonUniqueRotation(
            f"lambda_(m-1) + lambda_m = {s[-2] + sign * s[-1]:.3g} <= {tol_unique:g}"
        )
    D = np.ones(m)
    D[-1] = sign
    return (V * D) @ U.T


def well_position(x, y, tol_unique=TOL_UNIQUE) -> WellPositionedPair:
    x = np.asarray(x)
    y = np.asarray(y)
    check_regular(x)
    check_regular(y)
    R = optimal_rotation(x, y, tol_unique)
    return WellPositionedPair(x, R @ y, R)


def omega(x, y, tol_unique=TOL_UNIQUE):
    """``omega(x, y)``: the representative of ``[y]`` well positioned to ``x``."""
    return optimal_rotation(x, y, tol_unique) @ np.asarray(y)


def decompose(x, w) -> HorizontalVertical:
    """Split ``w = radial*x + horizontal + A x`` at ``x``.

    ``A`` is the skew solution of ``A x x^t + x x^t A = w x^t - x w^t``.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    try:
        A = solve_skew_sylvester(x @ x.T, w @ x.T - x @ w.T)
    except RankDeficient as exc:
        raise SingularStratum(str(exc)) from exc
    radial = float(np.vdot(w, x))
    vertical = A @ x
    horizontal = w - radial * x - vertical
    return HorizontalVertical(horizontal, vertical, A, radial)


def horizontal(x, w):
    return decompose(x, w).horizontal


def vertical(x, w):
    return decompose(x, w).vertical


def shape_log(x, y, tol_unique=TOL_UNIQUE):
    """``Log_x y = log_x omega(x, y)``, a horizontal vector at ``x``."""
    return sphere_log(x, omega(x, y, tol_unique))


def shape_exp(x, u):
    """``Exp_x u = exp_x u^h``."""
    return sphere_exp(x, horizontal(x, u))


def neighborhood_diagnostic(shapes, warn=True):
    """Largest pairwise shape distance and smallest ``lambda_(m-1)+lambda_m``.

    Uniqueness of means and rotations is guaranteed inside a ball of radius
    below pi/4 where ``lambda_(m-1) + lambda_m > 0`` pairwise; pairwise
    distances below pi/4 put every shape inside such a ball around any
    other.  Data outside is still processed; this only reports it.
    """
    max_dist = 0.0
    min_pair = np.inf
    for a, b in itertools.combinations(shapes, 2):
        lam = pseudo_singular_values(a, b).lambdas
        max_dist = max(max_dist, float(np.arccos(np.clip(lam.sum(), -1, 1))))
        if lam.size >= 2:
            min_pair = min(min_pair, float(lam[-2] + lam[-1]))
    inside = bool(max_dist < np.pi / 4 and min_pair > 0)
    if warn and not inside:
        warnings.warn(
            f"data spread (max shape distance {max_dist:.3f}, "
            f"min lambda_(m-1)+lambda_m {min_pair:.3g}) exceeds the uniqueness "
            "neighborhood; results may depend on initialization",
            RuntimeWarning,
            stacklevel=2,
        )
    return {"max_distance": max_dist, "min_pair_sum": min_pair, "inside": inside}


__all__ = [
    "PseudoSingularValues",
    "WellPositionedPair",
    "HorizontalVertical",
    "rank_ok",
    "check_regular",
    "pseudo_singular_values",
    "shape_dist",
    "optimal_rotation",
    "well_position",
    "omega",
    "decompose",
    "horizontal",
    "vertical",
    "shape_log",
    "shape_exp",
    "neighborhood_diagnostic",
    "sphere_dist",
]
