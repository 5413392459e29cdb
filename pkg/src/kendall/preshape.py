"""Pre-shapes and the spherical geometry of the pre-shape sphere.

A pre-shape is stored as an ``m x (k-1)`` matrix: the ``m x k`` landmark
matrix is multiplied on the right by a Helmert basis of the zero-sum
subspace, which removes translation and keeps the Frobenius inner product.
All geometric functions take and return plain ``ndarray`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import helmert

from .errors import CutLocus, DegenerateConfiguration, InvalidInput

CUT_LOCUS_MARGIN = 1e-6
SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class LandmarkConfiguration:
    points: np.ndarray  # k x m
    label: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise InvalidInput(f"landmarks must be a k x m array, got shape {pts.shape}")
        k, m = pts.shape
        if k < m + 1:
            raise InvalidInput(f"need at least m+1 = {m + 1} landmarks, got {k}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("landmarks contain non-finite values")
        object.__setattr__(self, "points", pts)

    @property
    def k(self):
        return self.points.shape[0]

    @property
    def m(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class PreShape:
    matrix: np.ndarray  # m x (k-1), unit Frobenius norm
    size_scale: float = 1.0
    label: str | None = None

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    @property
    def m(self):
        return self.matrix.shape[0]

    @property
    def k(self):
        return self.matrix.shape[1] + 1


@lru_cache(maxsize=32)
def helmert_basis(k: int) -> np.ndarray:
    """``k x (k-1)`` matrix with orthonormal columns spanning ``{1}^perp``."""
    H = helmert(k, full=False).T
    H.setflags(write=False)
    return H


def to_preshape(cfg: LandmarkConfiguration) -> PreShape:
    pts = cfg.points
    z = pts.T @ helmert_basis(pts.shape[0])
    scale = float(np.linalg.norm(z))
    # centering leaves round-off of order eps * |points| for coincident landmarks
    if not scale > 1e-12 * float(np.linalg.norm(pts)) or scale <= 1e-300:
        raise DegenerateConfiguration("all landmarks coincide")
    return PreShape(z / scale, scale, cfg.label)


def to_landmarks(x, size_scale=1.0) -> np.ndarray:
    """Inverse identification: centered ``k x m`` landmark coordinates."""
    x = np.asarray(x)
    return size_scale * (x @ helmert_basis(x.shape[-1] + 1).T).T


def inner(a, b) -> float:
    return float(np.vdot(np.asarray(a), np.asarray(b)))


def to_tangent(x, w):
    """Remove the radial component of ``w`` at ``x``."""
    x = np.asarray(x)
    return w - np.vdot(w, x) * x


def sphere_dist(x, y) -> float:
    """Great-circle distance, clamped to ``[0, pi]``."""
    x = np.asarray(x)
    y = np.asarray(y)
    # atan2 form equals arccos(<x,y>) but keeps full precision near 0 and pi
    return float(2.0 * np.arctan2(np.linalg.norm(x - y), np.linalg.norm(x + y)))


def sphere_log(x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    phi = sphere_dist(x, y)
    if phi > np.pi - CUT_LOCUS_MARGIN:
        raise CutLocus(f"points are (nearly) antipodal: distance {phi:.12g}")
    d = y - np.vdot(x, y) * x
    n = np.linalg.norm(d)
    if n == 0.0 or phi == 0.0:
        return np.zeros_like(x)
    return (phi / n) * d


def sphere_exp(x, u):
    x = np.asarray(x)
    u = np.asarray(u)
    n = np.linalg.norm(u)
    if n == 0.0:
        return x.copy()
    z = np.cos(n) * x + (np.sin(n) / n) * u
    return z / np.linalg.norm(z)


def slerp(t, x, y):
    """Geodesic ``Phi(t, x, y)`` from ``x`` (t=0) to ``y`` (t=1).

    ``t`` may be a scalar or a 1-d array; in the latter case the result is
    stacked along a leading axis.  Values outside ``[0, 1]`` extrapolate.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    t_arr = np.asarray(t, dtype=float)
    phi = sphere_dist(x, y)
    if phi > np.pi - CUT_LOCUS_MARGIN:
        raise CutLocus(f"points are (nearly) antipodal: distance {phi:.12g}")
    tt = t_arr.reshape(t_arr.shape + (1,) * x.ndim)
    if phi < 1e-12:
        return np.broadcast_to(x, t_arr.shape + x.shape).copy()
    if phi < SMALL_ANGLE:
        z = (1.0 - tt) * x + tt * y
        axes = tuple(range(t_arr.ndim, z.ndim))
        return z / np.sqrt(np.sum(z * z, axis=axes, keepdims=True))
    s = np.sin(phi)
    return (np.sin((1.0 - tt) * phi) * x + np.sin(tt * phi) * y) / s


def slerp_velocity(t, x, y):
    """``d/dt Phi(t, x, y)``; its norm is ``sphere_dist(x, y)``."""
    x = np.asarray(x)
    y = np.asarray(y)
    t_arr = np.asarray(t, dtype=float)
    tt = t_arr.reshape(t_arr.shape + (1,) * x.ndim)
    phi = sphere_dist(x, y)
    if phi < SMALL_ANGLE:
        return np.broadcast_to(y - x, tt.shape[: t_arr.ndim] + x.shape).copy()
    s = np.sin(phi)
    return phi * (np.cos(tt * phi) * y - np.cos((1.0 - tt) * phi) * x) / s
