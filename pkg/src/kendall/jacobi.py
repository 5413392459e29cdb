"""Jacobi fields along horizontal geodesics of shape space.

Along ``g(t) = cos(t) x + sin(t) v`` a Jacobi field is determined by its
horizontal initial data ``xi1 = J^h(0)``, ``xi2 = DJ^h/dt(0)`` (both normal to
``x`` and ``v``), a skew ``C`` for the vertical part ``J^v = C g`` and the
tangential coefficients ``(a, b)`` of ``(a + b t) g'``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, RankDeficient, SingularStratum, WrongDimension
from .matcore import solve_skew_sylvester
from .preshape import sphere_dist
from .shape import decompose, horizontal


@dataclass(frozen=True)
class JacobiData:
    x: np.ndarray
    v: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray
    skew_c: np.ndarray
    tangential: tuple = (0.0, 0.0)

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, f), dtype=float) for f in ("x", "v", "xi1", "xi2")]
        x, v, xi1, xi2 = arrs
        if any(a.shape != x.shape for a in arrs):
            raise InvalidInput("x, v, xi1 and xi2 must share one shape")
        C = np.asarray(self.skew_c, dtype=float)
        m = x.shape[0]
        if C.shape != (m, m) or np.linalg.norm(C + C.T) > 1e-10 * max(1.0, np.linalg.norm(C)):
            raise InvalidInput("skew_c must be a skew m x m matrix")
        if abs(np.linalg.norm(v) - 1.0) > 1e-10 or abs(np.vdot(x, v)) > 1e-10:
            raise InvalidInput("v must be a unit tangent vector at x")
        for name, xi in (("xi1", xi1), ("xi2", xi2)):
            scale = max(1.0, np.linalg.norm(xi))
            if abs(np.vdot(xi, v)) > 1e-10 * scale or abs(np.vdot(xi, x)) > 1e-10 * scale:
                raise InvalidInput(f"{name} must be orthogonal to x and v")
        for f, a in zip(("x", "v", "xi1", "xi2"), arrs):
            object.__setattr__(self, f, a)
        object.__setattr__(self, "skew_c", C)
        a, b = self.tangential
        object.__setattr__(self, "tangential", (float(a), float(b)))

    @classmethod
    def from_vectors(cls, x, v, xi1, xi2, skew_c=None, tangential=(0.0, 0.0)):
        """Project arbitrary inputs onto valid data: ``v`` horizontal unit,
        ``xi_i`` horizontal and orthogonal to ``v``, ``C`` skew."""
        x = np.asarray(x, dtype=float)
        x = x / np.linalg.norm(x)
        v = horizontal(x, v)
        v = v / np.linalg.norm(v)

        def normal(xi):
            xi = horizontal(x, xi)
            return xi - np.vdot(xi, v) * v

        m = x.shape[0]
        C = np.zeros((m, m)) if skew_c is None else 0.5 * (skew_c - np.transpose(skew_c))
        return cls(x, v, normal(xi1), normal(xi2), C, tangential)

    def geodesic(self, t):
        return math.cos(t) * self.x + math.sin(t) * self.v

    def geodesic_velocity(self, t):
        return -math.sin(t) * self.x + math.cos(t) * self.v

    def __add__(self, other):
        a1, b1 = self.tangential
        a2, b2 = other.tangential
        return JacobiData(
            self.x, self.v, self.xi1 + other.xi1, self.xi2 + other.xi2,
            self.skew_c + other.skew_c, (a1 + a2, b1 + b2),
        )


@dataclass(frozen=True)
class JacobiSample:
    t: float
    field_value: np.ndarray
    horizontal_part: np.ndarray
    vertical_part: np.ndarray
    tangential_part: np.ndarray


def ver_mixed(x, v, xi):
    """Skew ``A`` with ``A x x^t + x x^t A = v xi^t - xi v^t``."""
    x = np.asarray(x)
    return solve_skew_sylvester(x @ x.T, np.asarray(v) @ np.asarray(xi).T - np.asarray(xi) @ np.asarray(v).T)


def _project_h(g, w):
    try:
        return horizontal(g, w)
    except SingularStratum:
        raise
    except RankDeficient as exc:
        raise SingularStratum(str(exc)) from exc


def _sample(data, t, jh):
    g = data.geodesic(t)
    a, b = data.tangential
    jv = data.skew_c @ g
    jt = (a + b * t) * data.geodesic_velocity(t)
    return JacobiSample(float(t), jh + jv + jt, jh, jv, jt)


def jacobi_field(data: JacobiData, t: float) -> JacobiSample:
    """Jacobi field with the given initial data, any m.

    ``J^h(t) = hor_{g(t)}(cos(t) xi1 - sin(t) A x + sin(t) xi2)`` where
    ``A = ver_mixed(x, v, xi1)``; the vertical part is ``C g(t)``.
    """
    x = data.x
    A = ver_mixed(x, data.v, data.xi1)
    pre = math.cos(t) * data.xi1 + math.sin(t) * (data.xi2 - A @ x)
    jh = _project_h(data.geodesic(t), pre)
    return _sample(data, t, jh)


def _split_2d(v, xi):
    """``xi = u + w`` with ``w = B v`` the projection onto ``Skew_2 . v``."""
    B = solve_skew_sylvester(v @ v.T, xi @ v.T - v @ xi.T)
    return xi - B @ v, B


def jacobi_field_2d(data: JacobiData, t: float) -> JacobiSample:
    """Planar case: ``J^h = cos(t) u1 + cos(2t) W1 + sin(t) u2 + sin(2t) W2 / 2``.

    ``u_i`` are constant along the geodesic and ``W_i(t) = B_i g'(t)`` is the
    h-parallel extension of ``w_i = B_i v``.
    """
    if data.x.shape[0] != 2:
        raise WrongDimension(f"planar formula needs m = 2, got m = {data.x.shape[0]}")
    try:
        u1, B1 = _split_2d(data.v, data.xi1)
        u2, B2 = _split_2d(data.v, data.xi2)
    except RankDeficient as exc:
        raise SingularStratum(str(exc)) from exc
    gd = data.geodesic_velocity(t)
    jh = (
        math.cos(t) * u1 + math.cos(2 * t) * (B1 @ gd)
        + math.sin(t) * u2 + 0.5 * math.sin(2 * t) * (B2 @ gd)
    )
    return _sample(data, t, jh)


def _slerp_coefficients(t, phi):
    """``a, b`` of ``Phi = a x + b y`` and ``da/dphi / sin(phi)``, ``db/dphi / sin(phi)``."""
    s = 1.0 - t
    if phi < 1e-4:
        # series in phi; the ratios stay finite as phi -> 0
        a = s * (1 + (1 - s * s) * phi * phi / 6)
        b = t * (1 + (1 - t * t) * phi * phi / 6)
        return a, b, s * (1 - s * s) / 3, t * (1 - t * t) / 3
    sp, cp = math.sin(phi), math.cos(phi)
    a = math.sin(s * phi) / sp
    b = math.sin(t * phi) / sp
    ap = (s * math.cos(s * phi) * sp - math.sin(s * phi) * cp) / sp**2
    bp = (t * math.cos(t * phi) * sp - math.sin(t * phi) * cp) / sp**2
    return a, b, ap / sp, bp / sp


def boundary_jacobi(x, y, u, t):
    """Jacobi field along ``Phi(., x, y)`` with ``J(0) = u`` and ``J(1) = 0``.

    Computed as the horizontal part of ``d/de Phi(t, x_e, omega(x_e, y))`` for
    ``x_e`` moving in direction ``u``.  The rotation re-alignment contributes
    ``Om y`` with ``Om (y x^t) + (y x^t) Om = u y^t - y u^t``, and the angle
    changes by ``-<u, y> / sin(phi)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    S = y @ x.T
    if np.linalg.norm(S - S.T) > 1e-8:
        raise InvalidInput("x and y must be well positioned")
    phi = sphere_dist(x, y)
    a, b, ap, bp = _slerp_coefficients(t, phi)
    try:
        Om = solve_skew_sylvester(S, u @ y.T - y @ u.T)
    except RankDeficient as exc:
        raise SingularStratum(str(exc)) from exc
    dphi_sin = -float(np.vdot(u, y))  # sin(phi) * dphi
    d = a * u + b * (Om @ y) + dphi_sin * (ap * x + bp * y)
    g = a * x + b * y
    return _project_h(g / np.linalg.norm(g), d)


def boundary_jacobi_approx(x, y, u, t):
    """Constant-curvature approximation of ``boundary_jacobi``.

    ``sin((1-t) phi)/sin(phi) (u_perp)^h + (1-t) u_par`` with ``u_par`` the
    component along the geodesic, carried as a multiple of the unit velocity.
    Exact on the sphere; in shape space the sectional curvature is at least 1,
    so this drops the O(phi^2) curvature correction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    phi = sphere_dist(x, y)
    if phi < 1e-12:
        return (1.0 - t) * u
    e = (y - math.cos(phi) * x) / math.sin(phi)
    c = float(np.vdot(u, e))
    g = (math.sin((1 - t) * phi) * x + math.sin(t * phi) * y) / math.sin(phi)
    gd = -math.sin(t * phi) * x + math.cos(t * phi) * e
    a = math.sin((1 - t) * phi) / math.sin(phi)
    return a * _project_h(g, u - c * e) + (1 - t) * c * gd


def _tangent(g, w):
    return w - np.vdot(w, g) * g


def jacobi_ode_residual(data: JacobiData, t_grid, field=jacobi_field) -> float:
    """Largest residual of the quotient Jacobi equations on a uniform grid.

    With ``K = (D J^v/dt)^v + 2 (D J^h/dt)^v`` the equations read
    ``(D^2J/dt^2 + J)^h = 2 (DK/dt)^h`` and ``(D^2J/dt^2 + J)^v = (DK/dt)^v``.
    Derivatives are central differences on the grid, so the residual is
    O(h^2) for a Jacobi field; it is evaluated at grid points two or more
    steps from either end.
    """
    ts = np.asarray(t_grid, dtype=float)
    if ts.size < 5:
        raise InvalidInput("need at least 5 grid points")
    h = ts[1] - ts[0]
    if not np.allclose(np.diff(ts), h, rtol=1e-9, atol=0):
        raise InvalidInput("grid must be uniform")
    gs = [data.geodesic(t) for t in ts]
    gds = [data.geodesic_velocity(t) for t in ts]
    J = [field(data, t).field_value for t in ts]
    parts = [decompose(g, j) for g, j in zip(gs, J)]
    Jh = [p.horizontal for p in parts]
    Jv = [p.vertical for p in parts]
    n = ts.size
    K = [None] * n
    for j in range(1, n - 1):
        dJv = _tangent(gs[j], (Jv[j + 1] - Jv[j - 1]) / (2 * h))
        dJh = _tangent(gs[j], (Jh[j + 1] - Jh[j - 1]) / (2 * h))
        K[j] = decompose(gs[j], dJv).vertical + 2.0 * decompose(gs[j], dJh).vertical
    worst = 0.0
    for j in range(2, n - 2):
        g = gs[j]
        d2 = _tangent(g, (J[j + 1] - 2 * J[j] + J[j - 1]) / h**2)
        d2 = d2 + float(np.vdot(J[j], gds[j])) * gds[j]
        lhs = decompose(g, d2 + J[j])
        dK = decompose(g, _tangent(g, (K[j + 1] - K[j - 1]) / (2 * h)))
        r = np.linalg.norm(lhs.horizontal - 2.0 * dK.horizontal) + np.linalg.norm(
            lhs.vertical - dK.vertical
        )
        worst = max(worst, float(r))
    return worst


__all__ = [
    "JacobiData",
    "JacobiSample",
    "ver_mixed",
    "jacobi_field",
    "jacobi_field_2d",
    "boundary_jacobi",
    "boundary_jacobi_approx",
    "jacobi_ode_residual",
]
