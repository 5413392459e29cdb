"""Horizontal parallel transport in shape space.

Three routes compute the same h-parallel field along a horizontal curve:

* ``transport_general`` integrates ``W' = A g - <W, g'> g`` (with ``A`` the
  skew solution of ``A g g^t + g g^t A = g' W^t - W g'^t``) along any sampled
  horizontal curve, in the full ``m x (k-1)`` space.
* ``transport_geodesic`` specialises to unit-speed geodesics, where ``A``
  obeys an ODE in ``Skew_m`` alone and ``W`` follows by quadrature.
* ``transport_closed_form`` is exact when ``C g'`` stays horizontal (always
  for m = 2, or when the payload is a spherical parallel field).

``transport_trajectory`` moves a whole observed trajectory to a new base
shape step by step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ClosedFormInapplicable,
    InvalidInput,
    KendallError,
    RankDeficient,
    SingularStratum,
    TransportFailed,
    TransportThroughSingularity,
)
from .matcore import RANK_RTOL, solve_skew_sylvester
from .preshape import slerp, sphere_dist, sphere_exp, sphere_log
from .shape import decompose, horizontal, optimal_rotation, shape_exp, shape_log

MAX_STEP = 0.01
CLOSED_FORM_TOL = 1e-8
MAX_SEGMENT_ANGLE = 0.1


@dataclass(frozen=True)
class Trajectory:
    """Time-stamped pre-shapes of one subject, times mapped onto ``[0, 1]``.

    ``time_offset`` and ``time_scale`` record the affine map so that
    ``original = time_offset + time_scale * t``.
    """

    subject_id: str
    times: np.ndarray
    shapes: np.ndarray  # N x m x (k-1)
    time_offset: float = 0.0
    time_scale: float = 1.0
    group: str | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        shapes = np.asarray(self.shapes, dtype=float)
        if times.ndim != 1 or shapes.ndim != 3 or shapes.shape[0] != times.size:
            raise InvalidInput("trajectory needs N times and an N x m x (k-1) shape stack")
        if times.size < 2:
            raise InvalidInput(f"trajectory {self.subject_id!r} needs at least 2 observations")
        if np.any(np.diff(times) <= 0):
            raise InvalidInput(f"times of {self.subject_id!r} must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "shapes", shapes)

    @classmethod
    def from_observations(cls, subject_id, times, shapes, group=None):
        """Build a trajectory and normalise ``times`` so that ``t_1 = 0, t_N = 1``."""
        times = np.asarray(times, dtype=float)
        order = np.argsort(times, kind="stable")
        times = times[order]
        shapes = np.stack([np.asarray(shapes[i], dtype=float) for i in order])
        if times.size < 2:
            raise InvalidInput(f"trajectory {subject_id!r} needs at least 2 observations")
        span = times[-1] - times[0]
        if not span > 0:
            raise InvalidInput(f"times of {subject_id!r} must be strictly increasing")
        return cls(subject_id, (times - times[0]) / span, shapes, float(times[0]), float(span), group)

    def __len__(self):
        return self.times.size

    @property
    def original_times(self):
        return self.time_offset + self.time_scale * self.times

    def observations(self):
        return list(zip(self.times, self.shapes))


@dataclass(frozen=True)
class TransportProblem:
    """Payload ``u`` at ``start`` to be moved along ``cos(s) x + sin(s) v``.

    ``skew_c`` is the skew ``C`` with ``C v v^t + v v^t C = u v^t - v u^t``
    (``C v`` is the projection of ``u`` onto ``Skew_m . v``); it is ``None``
    when ``v`` has rank below m - 1 and the closed form is unavailable.
    """

    start: np.ndarray
    direction: np.ndarray
    payload: np.ndarray
    skew_c: np.ndarray | None = None
    length: float | None = None
    _grams: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        x = np.asarray(self.start, dtype=float)
        v = np.asarray(self.direction, dtype=float)
        u = np.asarray(self.payload, dtype=float)
        nv = np.linalg.norm(v)
        if abs(nv - 1.0) > 1e-8:
            raise InvalidInput(f"direction must have unit norm, got {nv}")
        if abs(np.vdot(v, x)) > 1e-8 or abs(np.vdot(u, x)) > 1e-8:
            raise InvalidInput("direction and payload must be tangent at start")
        object.__setattr__(self, "start", x)
        object.__setattr__(self, "direction", v)
        object.__setattr__(self, "payload", u)
        if self.skew_c is None:
            try:
                C = solve_skew_sylvester(v @ v.T, u @ v.T - v @ u.T)
            except RankDeficient:
                C = None
            object.__setattr__(self, "skew_c", C)
        object.__setattr__(self, "_grams", (x @ x.T, x @ v.T, v @ v.T))

    @classmethod
    def from_endpoints(cls, x, y, u):
        """Problem along the horizontal geodesic from ``x`` to ``omega(x, y)``.

        ``length`` is set to the geodesic length, so ``transport_*(p, p.length)``
        lands on ``omega(x, y)``.
        """
        x = np.asarray(x, dtype=float)
        yy = optimal_rotation(x, y) @ np.asarray(y, dtype=float)
        phi = sphere_dist(x, yy)
        if phi < 1e-14:
            raise InvalidInput("endpoints coincide in shape space; direction undefined")
        v = sphere_log(x, yy) / phi
        return cls(x, v / np.linalg.norm(v), np.asarray(u, dtype=float), length=phi)

    def point(self, t):
        return math.cos(t) * self.start + math.sin(t) * self.direction

    def velocity(self, t):
        return -math.sin(t) * self.start + math.cos(t) * self.direction


def _n_steps(t, h_max=MAX_STEP):
    """Even number of steps with step ``<= min(h_max, |t|/50)``."""
    n = max(50, int(math.ceil(abs(t) / h_max)))
    return n + (n % 2)


def _gram_stack(grams, s):
    """``g g^t`` and ``g' g^t`` for ``g(s) = cos(s) x + sin(s) v`` on a stack of ``s``."""
    X, XV, VV = grams
    VX = XV.T
    c = np.cos(s)[:, None, None]
    sn = np.sin(s)[:, None, None]
    P = c * c * X + c * sn * (XV + VX) + sn * sn * VV
    D = -sn * c * X - sn * sn * XV + c * c * VX + c * sn * VV  # g' g^t
    return P, D


def _sylvester_bases(P):
    w, Q = np.linalg.eigh(0.5 * (P + np.swapaxes(P, -1, -2)))
    tol = RANK_RTOL * np.abs(w).max(axis=-1)
    bad = (np.sum(w <= tol[:, None], axis=-1) >= 2) | (w[:, 0] + w[:, 1] <= tol)
    if np.any(bad):
        raise TransportThroughSingularity("geodesic meets the singular stratum")
    denom = w[:, :, None] + w[:, None, :]
    idx = np.arange(w.shape[1])
    denom[:, idx, idx] = np.inf
    return Q, denom


def _solve_in_basis(Q, denom, B):
    return Q @ ((Q.T @ B @ Q) / denom) @ Q.T


def transport_geodesic(p: TransportProblem, t: float):
    """h-parallel transport of ``p.payload`` to ``g(t)`` via the skew-matrix ODE.

    Along a unit-speed horizontal geodesic the skew field ``A(s)`` with
    ``W' = A g - <u, v> g`` satisfies
    ``A' g g^t + g g^t A' = -3 (A g' g^t + g g'^t A)``, an ODE in ``Skew_m``
    whose cost does not depend on the number of landmarks.  ``A`` is
    integrated with RK4; ``W`` is rebuilt from Simpson integrals of
    ``(A - <u,v>) cos s`` and ``(A - <u,v>) sin s``.
    """
    x, v, u = p.start, p.direction, p.payload
    if t == 0.0:
        return u.copy()
    m = x.shape[0]
    c_uv = float(np.vdot(u, v))
    n = _n_steps(t)
    h = t / n
    s_all = np.arange(2 * n + 1) * (h / 2.0)  # nodes and midpoints
    P, D = _gram_stack(p._grams, s_all)
    Q, denom = _sylvester_bases(P)
    try:
        A = solve_skew_sylvester(x @ x.T, v @ u.T - u @ v.T)
    except RankDeficient as exc:
        raise TransportThroughSingularity(str(exc)) from exc

    def rhs(j, A):
        Dj = D[j]
        B = -3.0 * (A @ Dj + Dj.T @ A)
        return _solve_in_basis(Q[j], denom[j], B)

    As = np.empty((n + 1, m, m))
    As[0] = A
    for i in range(n):
        j = 2 * i
        k1 = rhs(j, A)
        k2 = rhs(j + 1, A + 0.5 * h * k1)
        k3 = rhs(j + 1, A + 0.5 * h * k2)
        k4 = rhs(j + 2, A + h * k3)
        A = A + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        A = 0.5 * (A - A.T)
        As[i + 1] = A

    nodes = s_all[::2]
    wts = np.ones(n + 1)
    wts[1:-1:2] = 4.0
    wts[2:-1:2] = 2.0
    wts *= h / 3.0
    Ash = As - c_uv * np.eye(m)
    Ix = np.einsum("j,jab->ab", wts * np.cos(nodes), Ash)
    Iv = np.einsum("j,jab->ab", wts * np.sin(nodes), Ash)
    return u + Ix @ x + Iv @ v


def closed_form_applicable(p: TransportProblem, tol=CLOSED_FORM_TOL) -> bool:
    """Whether ``C g'(s)`` is horizontal along the whole geodesic.

    ``(C g') g^t`` is a combination of ``1, cos 2s, sin 2s``, so checking it
    at three distinct angles settles it for every ``s``.
    """
    C = p.skew_c
    if C is None:
        return False
    if not np.any(C):
        return True
    for s in (0.0, math.pi / 3, 2 * math.pi / 3):
        g = p.point(s)
        w = C @ p.velocity(s)
        M = w @ g.T
        if np.linalg.norm(M - M.T) > tol * max(1.0, np.linalg.norm(C)):
            return False
    return True


def transport_closed_form(p: TransportProblem, t: float):
    """``W(t) = u + (<u, v> + C)(g'(t) - v)``, valid when ``C g'`` is horizontal."""
    if not closed_form_applicable(p):
        raise ClosedFormInapplicable("C g' is not horizontal along this geodesic")
    u, v = p.payload, p.direction
    d = p.velocity(t) - v
    return u + float(np.vdot(u, v)) * d + p.skew_c @ d


def transport_closed_form_endpoint(x, y, u):
    """Closed-form transport of ``u`` from ``x`` to a well-positioned ``y``.

    ``W_y = u - 2 (<u, y> + C sin(phi)) (x + y) / |x + y|^2``.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    p = TransportProblem.from_endpoints(x, y, u)
    if not closed_form_applicable(p):
        raise ClosedFormInapplicable("C g' is not horizontal along this geodesic")
    yy = p.point(p.length)
    s = x + yy
    coef = float(np.vdot(u, yy)) * np.eye(x.shape[0]) + math.sin(p.length) * p.skew_c
    return u - 2.0 * (coef @ s) / float(np.vdot(s, s))


def geodesic_path(x, y, n):
    """``n`` samples of the horizontal geodesic from ``x`` to ``omega(x, y)``."""
    yy = optimal_rotation(x, y) @ np.asarray(y)
    return slerp(np.linspace(0.0, 1.0, n), x, yy)


def transport_general(path, u, h_max=MAX_STEP):
    """h-parallel transport of ``u`` along a sampled horizontal curve.

    ``path`` is a stack of pre-shapes (consecutive samples closer than 0.1
    rad); between samples the curve is the great-circle arc.  Each RK4 step is
    followed by a horizontal re-projection.  Returns the field at the last
    sample.
    """
    path = np.asarray(path, dtype=float)
    if path.ndim != 3 or path.shape[0] < 1:
        raise InvalidInput("path must be a stack of pre-shapes")
    W = np.asarray(u, dtype=float).copy()

    def field(g, gd, W):
        try:
            A = solve_skew_sylvester(g @ g.T, gd @ W.T - W @ gd.T)
        except RankDeficient as exc:
            raise TransportFailed(f"path meets the singular stratum: {exc}") from exc
        return A @ g - np.vdot(W, gd) * g

    for a, b in zip(path[:-1], path[1:]):
        phi = sphere_dist(a, b)
        if phi > MAX_SEGMENT_ANGLE:
            raise InvalidInput(f"path samples {phi:.3g} rad apart; resample below {MAX_SEGMENT_ANGLE}")
        if phi == 0.0:
            continue
        e = sphere_log(a, b) / phi
        n = max(1, int(math.ceil(phi / h_max)))
        h = phi / n
        if h < 1e-300:
            raise TransportFailed("step size underflow")

        def g(s):
            return math.cos(s) * a + math.sin(s) * e

        def gd(s):
            return -math.sin(s) * a + math.cos(s) * e

        s = 0.0
        for _ in range(n):
            k1 = field(g(s), gd(s), W)
            k2 = field(g(s + h / 2), gd(s + h / 2), W + 0.5 * h * k1)
            k3 = field(g(s + h / 2), gd(s + h / 2), W + 0.5 * h * k2)
            k4 = field(g(s + h), gd(s + h), W + h * k3)
            W = W + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            s += h
            try:
                W = decompose(g(s), W).horizontal
            except SingularStratum as exc:
                raise TransportFailed(str(exc)) from exc
    return W


def transport_velocity(x, v, ref, method="auto"):
    """Transport the horizontal vector ``v`` at ``x`` to the shape ``ref``.

    The path is the geodesic from ``x`` to ``omega(x, ref)``; the result is
    expressed at the representative ``ref`` as given (rotated back), so
    velocities of many subjects land in one tangent space.
    """
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    v = np.asarray(v, dtype=float)
    R = optimal_rotation(x, ref)
    rr = R @ ref
    phi = sphere_dist(x, rr)
    if phi < 1e-14:
        return R.T @ v
    e = sphere_log(x, rr) / phi
    p = TransportProblem(x, e / np.linalg.norm(e), v, length=phi)
    if method == "closed" or (method == "auto" and closed_form_applicable(p)):
        W = transport_closed_form(p, phi)
    elif method in ("auto", "geodesic"):
        W = transport_geodesic(p, phi)
    elif method == "general":
        n = max(2, int(math.ceil(phi / (0.5 * MAX_SEGMENT_ANGLE))) + 1)
        W = transport_general(slerp(np.linspace(0, 1, n), x, rr), v)
    else:
        raise InvalidInput(f"unknown transport method {method!r}")
    return R.T @ W


parallel_transport = transport_velocity


def transport_trajectory(traj: Trajectory, ref, method="auto") -> Trajectory:
    """Move ``traj`` so that it starts at ``ref``, preserving its increments.

    ``y_1 = ref`` and ``y_{k+1} = Exp(y_k, T(v_k))`` where
    ``v_k = Log_{x_k} x_{k+1}`` and ``T`` transports from ``x_k`` to ``y_k``.
    """
    xs = traj.shapes
    ys = [np.asarray(ref, dtype=float)]
    for i in range(len(xs) - 1):
        try:
            vk = shape_log(xs[i], xs[i + 1])
            w = transport_velocity(xs[i], vk, ys[i], method=method)
            ys.append(shape_exp(ys[i], w))
        except KendallError as exc:
            raise TransportFailed(f"step {i} of {traj.subject_id!r}: {exc}") from exc
    return Trajectory(
        traj.subject_id, traj.times.copy(), np.stack(ys), traj.time_offset, traj.time_scale, traj.group
    )


__all__ = [
    "Trajectory",
    "TransportProblem",
    "transport_geodesic",
    "transport_closed_form",
    "transport_closed_form_endpoint",
    "closed_form_applicable",
    "transport_general",
    "geodesic_path",
    "transport_velocity",
    "parallel_transport",
    "transport_trajectory",
    "horizontal",
    "sphere_exp",
]
