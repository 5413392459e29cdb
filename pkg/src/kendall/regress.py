"""Geodesic regression in shape space.

Fits ``t -> Phi(t, x, omega(x, y))`` to time-stamped shapes by minimising
``F(x, y) = sum_i d^2(q_i, Phi(t_i, x, omega(x, y)))`` over pairs of
pre-shapes.  The solver works on the product of two pre-shape spheres and
re-aligns ``y`` to ``x`` after every accepted step.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CutLocus,
    DegenerateData,
    InvalidInput,
    KendallError,
    NonConvergence,
    NonUniqueRotation,
    RankDeficient,
    SingularStratum,
)
from .matcore import solve_skew_sylvester
from .preshape import sphere_dist, sphere_exp, sphere_log, to_tangent
from .shape import TOL_UNIQUE, horizontal, omega, optimal_rotation
from .stats import frechet_mean
from .transport import Trajectory, transport_velocity

SOLVERS = ("gradient_descent_armijo", "trust_region_fd_hessian")


@dataclass(frozen=True)
class RegressionConfig:
    max_iters: int = 500
    grad_tol: float | None = None  # default 1e-8 * N
    solver: str = "gradient_descent_armijo"
    armijo_c: float = 1e-4
    max_backtracks: int = 60
    stagnation_iters: int = 20
    tr_radius_max: float = math.pi
    tr_accept: float = 0.1
    hessian_step: float = 1e-6
    cg_max_iters: int = 200
    gradient: str = "exact"  # "exact", "jacobi" or "finite_difference"
    time_budget: float | None = None
    compute_r_squared: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidInput("max_iters must be at least 1")
        if self.grad_tol is not None and not self.grad_tol > 0:
            raise InvalidInput("grad_tol must be positive")
        if self.solver not in SOLVERS:
            raise InvalidInput(f"solver must be one of {SOLVERS}")
        if self.gradient not in ("exact", "jacobi", "finite_difference"):
            raise InvalidInput(f"unknown gradient variant {self.gradient!r}")

    def tolerance(self, n_obs):
        return self.grad_tol if self.grad_tol is not None else 1e-8 * n_obs


@dataclass
class SolverReport:
    solver: str
    iterations: int
    grad_norm: float
    converged: bool
    objective_trace: list = field(default_factory=list)
    reason: str = ""
    elapsed: float = 0.0


@dataclass
class GeodesicModel:
    x_star: np.ndarray
    y_star: np.ndarray  # well positioned to x_star
    objective: float
    residuals: np.ndarray
    r_squared: float | None
    solver_report: SolverReport

    def point(self, t):
        from .preshape import slerp

        return slerp(t, self.x_star, self.y_star)

    @property
    def velocity(self):
        """Initial velocity ``Log_x y`` over unit time."""
        return sphere_log(self.x_star, self.y_star)


def _as_arrays(data):
    if isinstance(data, Trajectory):
        return data.times, data.shapes
    times, shapes = data
    return np.asarray(times, dtype=float), np.asarray(shapes, dtype=float)


def _coefficients(t, phi):
    """Slerp weights ``a, b`` and their phi-derivatives divided by ``sin(phi)``."""
    t = np.asarray(t, dtype=float)
    s = 1.0 - t
    if phi < 1e-4:
        p2 = phi * phi
        return (s * (1 + (1 - s * s) * p2 / 6), t * (1 + (1 - t * t) * p2 / 6),
                s * (1 - s * s) / 3, t * (1 - t * t) / 3)
    sp, cp = math.sin(phi), math.cos(phi)
    a = np.sin(s * phi) / sp
    b = np.sin(t * phi) / sp
    ap = (s * np.cos(s * phi) * sp - np.sin(s * phi) * cp) / sp**3
    bp = (t * np.cos(t * phi) * sp - np.sin(t * phi) * cp) / sp**3
    return a, b, ap, bp


def _align_batch(P, Q, tol_unique=TOL_UNIQUE):
    """Rotate each ``Q[i]`` onto ``P[i]``; returns aligned stack and sums of
    pseudo-singular values."""
    M = Q @ np.swapaxes(P, 1, 2)
    U, s, Vt = np.linalg.svd(M)
    V = np.swapaxes(Vt, 1, 2)
    sign = np.where(np.linalg.det(V @ np.swapaxes(U, 1, 2)) > 0, 1.0, -1.0)
    if s.shape[1] >= 2 and np.any(s[:, -2] + sign * s[:, -1] <= tol_unique):
        raise NonUniqueRotation("optimal rotation to an observation is not unique")
    D = np.ones_like(s)
    D[:, -1] = sign
    R = (V * D[:, None, :]) @ np.swapaxes(U, 1, 2)
    total = np.sum(s[:, :-1], axis=1) + sign * s[:, -1]
    return R @ Q, total


def _curve(times, x, yp):
    phi = sphere_dist(x, yp)
    a, b, ap, bp = _coefficients(times, phi)
    P = a[:, None, None] * x + b[:, None, None] * yp
    return P, phi, a, b, ap, bp


def objective(x, y, data) -> float:
    """``sum_i d^2(q_i, Phi(t_i, x, omega(x, y)))``."""
    return float(np.sum(residuals(x, y, data) ** 2))


def residuals(x, y, data):
    """Per-observation distances ``d(q_i, Phi(t_i))``."""
    times, shapes = _as_arrays(data)
    yp = omega(x, y)
    P = _curve(times, np.asarray(x, dtype=float), yp)[0]
    Qa, _ = _align_batch(P, shapes)
    return 2.0 * np.arctan2(np.linalg.norm((P - Qa).reshape(len(P), -1), axis=1),
                            np.linalg.norm((P + Qa).reshape(len(P), -1), axis=1))


def _logs(P, shapes):
    Qa, _ = _align_batch(P, shapes)
    n = len(P)
    dist = 2.0 * np.arctan2(np.linalg.norm((P - Qa).reshape(n, -1), axis=1),
                            np.linalg.norm((P + Qa).reshape(n, -1), axis=1))
    if np.any(dist > math.pi - 1e-6):
        raise CutLocus("an observation is antipodal to the fitted curve")
    ip = np.einsum("nij,nij->n", P, Qa)
    d = Qa - ip[:, None, None] * P
    nd = np.linalg.norm(d.reshape(n, -1), axis=1)
    scale = np.divide(dist, nd, out=np.zeros_like(dist), where=nd > 0)
    return scale[:, None, None] * d


def _gradient_exact(x, y, times, shapes):
    """Chain rule through slerp and the alignment ``omega``.

    With ``y' = R y`` well positioned, ``Phi_i = a_i x + b_i y'`` and
    ``g_i = -2 Log_{Phi_i} q_i``; the phi-dependence of ``a, b`` gives the
    terms along ``y'`` and ``x``, and the rotation ``R(x, y)`` contributes
    through a skew Sylvester equation with ``S = y' x^t``.
    """
    R = optimal_rotation(x, y)
    yp = R @ y
    P, phi, a, b, ap, bp = _curve(times, x, yp)
    G = -2.0 * _logs(P, shapes)
    Gx = np.einsum("n,nij->ij", a, G)
    Gy = np.einsum("n,nij->ij", b, G)
    csum = float(np.sum(ap * np.einsum("nij,ij->n", G, x)) + np.sum(bp * np.einsum("nij,ij->n", G, yp)))
    Gx = Gx - csum * yp
    Gy = Gy - csum * x
    H = Gy @ yp.T
    S = yp @ x.T
    try:
        Z = solve_skew_sylvester(0.5 * (S + S.T), 0.5 * (H - H.T))
    except RankDeficient as exc:
        raise SingularStratum(str(exc)) from exc
    gx = to_tangent(x, Gx + 2.0 * Z @ yp)
    gy = to_tangent(y, R.T @ (Gy - 2.0 * Z @ x))
    return gx, gy


def _gradient_jacobi(x, y, times, shapes):
    """Adjoint of the constant-curvature boundary Jacobi field, transported back.

    ``-2 sum_i P_i [a_i (W_i^perp)^h + (1 - t_i) W_i^par]`` with
    ``W_i = Log_{Phi_i} q_i``.  Exact when all observations sit at ``t = 0``;
    otherwise it ignores curvature beyond that of the sphere.
    """
    R = optimal_rotation(x, y)
    yp = R @ y
    P, phi, a, b, _, _ = _curve(times, x, yp)
    W = _logs(P, shapes)
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    if phi < 1e-12:
        for w, t in zip(W, times):
            gx += (1 - t) * w
            gy += t * w
        return -2.0 * horizontal(x, gx), -2.0 * R.T @ horizontal(yp, gy)
    e = sphere_log(x, yp) / phi
    for p, w, t, ai, bi in zip(P, W, times, a, b):
        vel = -math.sin(t * phi) * x + math.cos(t * phi) * e
        c = float(np.vdot(w, vel))
        perp = horizontal(p, w - c * vel)
        gx += transport_velocity(p, ai * perp + (1 - t) * c * vel, x, method="geodesic")
        gy += transport_velocity(p, bi * perp + t * c * vel, yp, method="geodesic")
    return -2.0 * gx, -2.0 * R.T @ gy


class _OutOfTime(Exception):
    pass


def _gradient_fd(x, y, times, shapes, step=1e-6, deadline=None):
    """Central differences of ``F(x/|x|, y/|y|)`` in every ambient coordinate.

    With a ``deadline`` (``time.perf_counter`` value) the loop stops early by
    raising ``_OutOfTime``; one gradient costs 4 m (k-1) objective calls.
    """
    data = (times, shapes)
    grads = []
    for which in (0, 1):
        base = [x.copy(), y.copy()]
        g = np.zeros(x.size)
        flat = base[which].ravel()
        for j in range(flat.size):
            if deadline is not None and time.perf_counter() > deadline:
                raise _OutOfTime
            vals = []
            for sgn in (1.0, -1.0):
                z = flat.copy()
                z[j] += sgn * step
                zz = (z / np.linalg.norm(z)).reshape(x.shape)
                args = [base[0], base[1]]
                args[which] = zz
                vals.append(objective(args[0], args[1], data))
            g[j] = (vals[0] - vals[1]) / (2 * step)
        grads.append(to_tangent(base[which], g.reshape(x.shape)))
    return grads[0], grads[1]


_GRADIENTS = {"exact": _gradient_exact, "jacobi": _gradient_jacobi, "finite_difference": _gradient_fd}


def gradient(x, y, data, method="exact"):
    """Riemannian gradient of ``F`` with respect to ``x`` and ``y``.

    Both parts are horizontal (``F`` is invariant under rotating either
    argument).  ``method="jacobi"`` gives the constant-curvature variant.
    """
    times, shapes = _as_arrays(data)
    try:
        fn = _GRADIENTS[method]
    except KeyError:
        raise InvalidInput(f"unknown gradient method {method!r}") from None
    return fn(np.asarray(x, dtype=float), np.asarray(y, dtype=float), times, shapes)


class _Problem:
    def __init__(self, times, shapes, method, deadline=None):
        self.times = times
        self.shapes = shapes
        self.data = (times, shapes)
        self.grad_fn = _GRADIENTS[method]
        self.deadline = deadline if method == "finite_difference" else None

    def cost(self, x, y):
        return objective(x, y, self.data)

    def grad(self, x, y):
        if self.deadline is not None:
            return self.grad_fn(x, y, self.times, self.shapes, deadline=self.deadline)
        return self.grad_fn(x, y, self.times, self.shapes)


def _norm2(gx, gy):
    return math.sqrt(float(np.vdot(gx, gx) + np.vdot(gy, gy)))


def _retract(x, y, dx, dy):
    xn = sphere_exp(x, dx)
    return xn, omega(xn, sphere_exp(y, dy))


def _solve_gd(prob, x, y, cfg, tol, t0):
    f = prob.cost(x, y)
    gx, gy = prob.grad(x, y)
    gn = _norm2(gx, gy)
    trace = [f]
    best = (f, x, y)
    if gn > 0:
        # Lipschitz estimate from a short probe step
        eps = 1e-4 / gn
        xp, yp = _retract(x, y, -eps * gx, -eps * gy)
        hx, hy = prob.grad(xp, yp)
        L = _norm2(hx - gx, hy - gy) / (eps * gn)
        alpha = 1.0 / L if L > 0 else 1.0
    else:
        alpha = 1.0
    stagnant = 0
    it = 0
    reason = "max_iters"
    while it < cfg.max_iters:
        if gn < tol:
            reason = "grad_tol"
            break
        if cfg.time_budget is not None and time.perf_counter() - t0 > cfg.time_budget:
            reason = "time_budget"
            break
        it += 1
        step = min(alpha, math.pi / (2 * gn))
        accepted = False
        for _ in range(cfg.max_backtracks):
            xn, yn = _retract(x, y, -step * gx, -step * gy)
            fn = prob.cost(xn, yn)
            if fn <= f - cfg.armijo_c * step * gn * gn:
                accepted = True
                break
            step *= 0.5
        if (not accepted or fn >= f) and step * gn * gn < 1e3 * np.finfo(float).eps * max(abs(f), 1e-300):
            # the predicted decrease is below the cost's rounding level, so
            # take the curvature step along -grad and judge it by the gradient norm
            eps = 1e-4 / gn
            xp, yp = _retract(x, y, -eps * gx, -eps * gy)
            px, py = prob.grad(xp, yp)
            curv = float(np.vdot(gx, gx - px) + np.vdot(gy, gy - py)) / (eps * gn * gn)
            step = min(1.0 / curv if curv > 0 else alpha, math.pi / (2 * gn))
            xn, yn = _retract(x, y, -step * gx, -step * gy)
            fn = prob.cost(xn, yn)
            hx, hy = prob.grad(xn, yn)
            if _norm2(hx, hy) < gn and fn <= f * (1 + 1e3 * np.finfo(float).eps):
                x, y, f, gx, gy = xn, yn, min(f, fn), hx, hy
                gn = _norm2(gx, gy)
                trace.append(f)
                continue
        if not accepted or fn >= f:
            stagnant += 1
            alpha = step
            if stagnant >= cfg.stagnation_iters:
                raise NonConvergence(
                    f"no decrease for {stagnant} iterations (grad norm {gn:.3g})",
                    best=_model_from(prob, best[1], best[2], cfg, it, gn, trace, "stagnation", t0),
                )
            continue
        stagnant = 0
        hx, hy = prob.grad(xn, yn)
        # Barzilai-Borwein step from ambient differences
        sx, sy = xn - x, yn - y
        dgx, dgy = hx - gx, hy - gy
        sy_ = float(np.vdot(sx, dgx) + np.vdot(sy, dgy))
        ss = float(np.vdot(sx, sx) + np.vdot(sy, sy))
        alpha = ss / sy_ if sy_ > 0 else 2.0 * step
        x, y, f, gx, gy = xn, yn, fn, hx, hy
        gn = _norm2(gx, gy)
        trace.append(f)
        if f < best[0]:
            best = (f, x, y)
    else:
        if gn < tol:
            reason = "grad_tol"
    return x, y, it, gn, trace, reason


def _tcg(prob, x, y, gx, gy, radius, cfg):
    """Steihaug-Toint truncated CG on the horizontal space at ``(x, y)``."""

    def proj(vx, vy):
        return horizontal(x, vx), horizontal(y, vy)

    def hess(vx, vy):
        nv = _norm2(vx, vy)
        if nv == 0:
            return np.zeros_like(vx), np.zeros_like(vy)
        h = cfg.hessian_step / nv
        xp = sphere_exp(x, h * vx)
        yp = sphere_exp(y, h * vy)
        ax, ay = prob.grad(xp, yp)
        return proj(to_tangent(x, (ax - gx) / h), to_tangent(y, (ay - gy) / h))

    ex, ey = np.zeros_like(x), np.zeros_like(y)
    rx, ry = gx.copy(), gy.copy()
    px, py = -rx, -ry
    r0 = _norm2(rx, ry)
    rr = r0 * r0
    for _ in range(cfg.cg_max_iters):
        hx, hy = hess(px, py)
        curv = float(np.vdot(px, hx) + np.vdot(py, hy))
        if curv <= 0:
            tau = _to_boundary(ex, ey, px, py, radius)
            return ex + tau * px, ey + tau * py
        a = rr / curv
        nx, ny = ex + a * px, ey + a * py
        if _norm2(nx, ny) >= radius:
            tau = _to_boundary(ex, ey, px, py, radius)
            return ex + tau * px, ey + tau * py
        ex, ey = nx, ny
        rx, ry = rx + a * hx, ry + a * hy
        rr_new = float(np.vdot(rx, rx) + np.vdot(ry, ry))
        if math.sqrt(rr_new) <= r0 * min(r0, 0.1):
            break
        px, py = -rx + (rr_new / rr) * px, -ry + (rr_new / rr) * py
        rr = rr_new
    return ex, ey


def _to_boundary(ex, ey, px, py, radius):
    ee = float(np.vdot(ex, ex) + np.vdot(ey, ey))
    ep = float(np.vdot(ex, px) + np.vdot(ey, py))
    pp = float(np.vdot(px, px) + np.vdot(py, py))
    return (-ep + math.sqrt(ep * ep + pp * (radius * radius - ee))) / pp


def _solve_tr(prob, x, y, cfg, tol, t0):
    f = prob.cost(x, y)
    gx, gy = prob.grad(x, y)
    gn = _norm2(gx, gy)
    radius = cfg.tr_radius_max / 8
    trace = [f]
    it = 0
    stagnant = 0
    reason = "max_iters"
    while it < cfg.max_iters:
        if gn < tol:
            reason = "grad_tol"
            break
        if cfg.time_budget is not None and time.perf_counter() - t0 > cfg.time_budget:
            reason = "time_budget"
            break
        it += 1
        ex, ey = _tcg(prob, x, y, gx, gy, radius, cfg)
        ehe = _hess_quadratic(prob, x, y, gx, gy, ex, ey, cfg)
        model_dec = -(float(np.vdot(gx, ex) + np.vdot(gy, ey)) + 0.5 * ehe)
        xn, yn = _retract(x, y, ex, ey)
        fn = prob.cost(xn, yn)
        rho = (f - fn) / model_dec if model_dec > 0 else -1.0
        en = _norm2(ex, ey)
        if rho < 0.25:
            radius *= 0.25
        elif rho > 0.75 and abs(en - radius) < 1e-12 * max(1.0, radius):
            radius = min(2 * radius, cfg.tr_radius_max)
        if rho > cfg.tr_accept and fn < f:
            x, y, f = xn, yn, fn
            gx, gy = prob.grad(x, y)
            gn = _norm2(gx, gy)
            trace.append(f)
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= cfg.stagnation_iters:
                raise NonConvergence(
                    f"trust region stalled (grad norm {gn:.3g})",
                    best=_model_from(prob, x, y, cfg, it, gn, trace, "stagnation", t0),
                )
    else:
        if gn < tol:
            reason = "grad_tol"
    return x, y, it, gn, trace, reason


def _hess_quadratic(prob, x, y, gx, gy, ex, ey, cfg):
    """``<e, H e>`` by a finite difference of the gradient."""
    ne = _norm2(ex, ey)
    if ne == 0:
        return 0.0
    h = cfg.hessian_step / ne
    ax, ay = prob.grad(sphere_exp(x, h * ex), sphere_exp(y, h * ey))
    hx = horizontal(x, to_tangent(x, (ax - gx) / h))
    hy = horizontal(y, to_tangent(y, (ay - gy) / h))
    return float(np.vdot(ex, hx) + np.vdot(ey, hy))


def _model_from(prob, x, y, cfg, it, gn, trace, reason, t0, converged=False):
    res = residuals(x, y, prob.data)
    report = SolverReport(cfg.solver, it, gn, converged, list(trace), reason, time.perf_counter() - t0)
    return GeodesicModel(x, y, float(np.sum(res**2)), res, None, report)


def chord_initialization(times, shapes):
    """``(q_1, omega(q_1, q_N))`` from the observations at the smallest and
    largest time."""
    i0 = int(np.argmin(times))
    i1 = int(np.argmax(times))
    return shapes[i0].copy(), omega(shapes[i0], shapes[i1])


def fit(data, cfg: RegressionConfig | None = None, init=None, total_variance=None) -> GeodesicModel:
    """Least-squares geodesic through the observations.

    ``total_variance`` (``min_x G(x)``) may be supplied to skip the Fréchet
    mean when R^2 is computed repeatedly on the same shapes.
    """
    cfg = cfg or RegressionConfig()
    times, shapes = _as_arrays(data)
    if len(times) < 2:
        raise InvalidInput("need at least two observations")
    tol = cfg.tolerance(len(times))
    x, y = init if init is not None else chord_initialization(times, shapes)
    y = omega(x, y)
    t0 = time.perf_counter()
    deadline = None if cfg.time_budget is None else t0 + cfg.time_budget
    prob = _Problem(times, shapes, cfg.gradient, deadline)
    solve = _solve_gd if cfg.solver == "gradient_descent_armijo" else _solve_tr
    try:
        x, y, it, gn, trace, reason = solve(prob, x, y, cfg, tol, t0)
    except _OutOfTime:
        # budget ran out inside a finite-difference gradient; report the start
        it, gn, trace, reason = 0, math.inf, [prob.cost(x, y)], "time_budget"
    model = _model_from(prob, x, y, cfg, it, gn, trace, reason, t0, converged=gn < tol)
    if cfg.compute_r_squared:
        model.r_squared = r_squared(model, (times, shapes), total_variance)
    return model


def min_sum_squared(shapes):
    """``min_x G(x)`` via the Fréchet mean."""
    res = frechet_mean(list(shapes))
    return res.total_variance * len(shapes)


def r_squared(model: GeodesicModel, data, total=None) -> float:
    """``1 - F* / G*`` clamped to ``[0, 1]``."""
    times, shapes = _as_arrays(data)
    if total is None:
        total = min_sum_squared(shapes)
    # rounding leaves d ~ 1e-16 between copies of one shape
    if not total > 1e-20 * len(shapes):
        raise DegenerateData("all observations have the same shape; R^2 undefined")
    F = objective(model.x_star, model.y_star, (times, shapes))
    return float(min(1.0, max(0.0, 1.0 - F / total)))


def permutation_test(data, n_perms, seed, cfg: RegressionConfig | None = None, jobs=1,
                     r2_tol=1e-9):
    """Add-one permutation p-value of the observed R^2 under shuffled times.

    A permutation counts as at least as extreme when its R^2 is within
    ``r2_tol`` of the observed value or above.  Failed fits count as not
    extreme, with a warning.
    """
    if n_perms < 19:
        raise InvalidInput("n_perms must be at least 19")
    cfg = cfg or RegressionConfig()
    times, shapes = _as_arrays(data)
    total = min_sum_squared(shapes)
    observed = fit((times, shapes), cfg, total_variance=total).r_squared
    rng = np.random.default_rng(seed)
    perms = [rng.permutation(len(times)) for _ in range(n_perms)]

    def one(perm):
        try:
            return fit((times[perm], shapes), cfg, total_variance=total).r_squared
        except KendallError as exc:
            warnings.warn(f"permutation fit failed: {exc}", RuntimeWarning, stacklevel=2)
            return None

    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            r2s = list(pool.map(one, perms))
    else:
        r2s = [one(p) for p in perms]
    count = sum(1 for r in r2s if r is not None and r >= observed - r2_tol)
    return (1 + count) / (1 + n_perms)


__all__ = [
    "RegressionConfig",
    "SolverReport",
    "GeodesicModel",
    "objective",
    "residuals",
    "gradient",
    "fit",
    "chord_initialization",
    "r_squared",
    "min_sum_squared",
    "permutation_test",
]
