"""Acceptance suite: ten end-to-end criteria at their stated tolerances.

Every test records one PASS/FAIL line (printed in the pytest terminal
summary, or directly when this file is run as a script) and then asserts.
"""

import json
import math
import time
from pathlib import Path

import numpy as np

from kendall.cli import main
from kendall.jacobi import JacobiData, jacobi_field, jacobi_field_2d, jacobi_ode_residual
from kendall.preshape import slerp, sphere_exp
from kendall.regress import RegressionConfig, chord_initialization, fit, gradient, min_sum_squared, objective
from kendall.shape import decompose, horizontal, omega, shape_dist, shape_log, well_position
from kendall.stats import bh_fdr, frechet_mean, hotelling_t2
from kendall.transport import (
    TransportProblem,
    closed_form_applicable,
    transport_closed_form,
    transport_general,
    transport_geodesic,
    transport_velocity,
)
from oracles import baseline_fit, naive_shape_dist, permutation_t2_pvalues, step_up
from synth import geodesic_data, nearby, random_horizontal, random_preshape, random_rotation, write_manifest
from test_jacobi import random_data, residual_orders, variation

RESULTS = []


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    return ok


def rng_for(n):
    return np.random.default_rng(1000 + n)


# 1 --------------------------------------------------------------------------

def test_criterion_01_projections():
    rng = rng_for(1)
    t0 = time.perf_counter()
    dec = syl = equi = 0.0
    count = 0
    for m in (2, 3):
        for k in (4, 20):
            for _ in range(250):
                x = random_preshape(rng, m, k)
                w = rng.standard_normal(x.shape)
                d = decompose(x, w)
                dec = max(dec, np.linalg.norm(d.radial * x + d.horizontal + d.vertical - w),
                          abs(np.vdot(d.horizontal, d.vertical)), abs(np.vdot(d.horizontal, x)),
                          abs(np.vdot(d.vertical, x)))
                P = x @ x.T
                syl = max(syl, np.linalg.norm(d.skew @ P + P @ d.skew - (w @ x.T - x @ w.T)))
                R = random_rotation(rng, m)
                e = decompose(R @ x, R @ w)
                equi = max(equi, np.linalg.norm(e.horizontal - R @ d.horizontal),
                           np.linalg.norm(e.vertical - R @ d.vertical))
                count += 1
    elapsed = time.perf_counter() - t0
    ok = dec < 1e-10 and syl < 1e-10 and equi < 1e-10 and elapsed < 5 and count == 1000
    record(1, ok, f"{count} cases: decomposition {dec:.1e}, Sylvester {syl:.1e}, "
                  f"equivariance {equi:.1e}, {elapsed:.2f}s")
    assert ok


# 2 --------------------------------------------------------------------------

def sampled_rotation_min(rng, x, y, n, batch=200_000):
    M = (x @ y.T).ravel()
    best = -np.inf
    for start in range(0, n, batch):
        q = rng.standard_normal((min(batch, n - start), 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        w, a, b, c = q.T
        R = np.stack([
            1 - 2 * (b * b + c * c), 2 * (a * b - c * w), 2 * (a * c + b * w),
            2 * (a * b + c * w), 1 - 2 * (a * a + c * c), 2 * (b * c - a * w),
            2 * (a * c - b * w), 2 * (b * c + a * w), 1 - 2 * (a * a + b * b),
        ], axis=1)
        best = max(best, float((R @ M).max()))
    return math.acos(min(1.0, best))


def test_criterion_02_distance_vs_sampling():
    rng = rng_for(2)
    t0 = time.perf_counter()
    below = True
    gap = 0.0
    for _ in range(50):
        x = random_preshape(rng, 3, 5)
        y = random_preshape(rng, 3, 5)
        d = shape_dist(x, y)
        s = sampled_rotation_min(rng, x, y, 1_000_000)
        below &= d <= s + 1e-12
        gap = max(gap, s - d)
    elapsed = time.perf_counter() - t0
    ok = below and gap < 2e-3 and elapsed < 60
    record(2, ok, f"50 pairs x 1e6 rotations: never above sampled min={below}, "
                  f"max gap {gap:.1e}, {elapsed:.1f}s")
    assert ok


# 3 --------------------------------------------------------------------------

def test_criterion_03_transport_ladder():
    rng = rng_for(3)
    pair = norm = inner = tangent = 0.0
    n_closed = 0
    for i in range(200):
        m = 2 if i % 2 else 3
        x = random_preshape(rng, m, 8)
        v = random_horizontal(rng, x, 1.0)
        u1 = random_horizontal(rng, x, rng.uniform(0.3, 2.0))
        u2 = random_horizontal(rng, x, rng.uniform(0.3, 2.0))
        t = rng.uniform(0.1, 1.2)
        p1, p2 = TransportProblem(x, v, u1), TransportProblem(x, v, u2)
        g1, g2 = transport_geodesic(p1, t), transport_geodesic(p2, t)
        path = np.stack([p1.point(s) for s in np.linspace(0, t, int(math.ceil(t / 0.05)) + 1)])
        gen = transport_general(path, u1)
        pair = max(pair, np.linalg.norm(g1 - gen))
        if closed_form_applicable(p1):
            n_closed += 1
            c = transport_closed_form(p1, t)
            pair = max(pair, np.linalg.norm(c - g1), np.linalg.norm(c - gen))
        norm = max(norm, abs(np.linalg.norm(g1) - np.linalg.norm(u1)), abs(np.linalg.norm(gen) - np.linalg.norm(u1)))
        inner = max(inner, abs(np.vdot(g1, g2) - np.vdot(u1, u2)))
        # the geodesic's own velocity is parallel
        pv = TransportProblem(x, v, v)
        tangent = max(tangent, np.linalg.norm(transport_geodesic(pv, t) - pv.velocity(t)))
        if i < 40:
            ref = random_rotation(rng, m) @ nearby(rng, x, 0.5)
            tangent = max(tangent, np.linalg.norm(transport_velocity(x, shape_log(x, ref), ref) + shape_log(ref, x)))
    ok = pair < 1e-6 and norm < 1e-6 and inner < 1e-6 and tangent < 1e-8
    record(3, ok, f"200 problems ({n_closed} closed-form): pairwise {pair:.1e}, norm {norm:.1e}, "
                  f"inner product {inner:.1e}, tangent case {tangent:.1e}")
    assert ok


# 4 --------------------------------------------------------------------------

def test_criterion_04_jacobi():
    rng = rng_for(4)
    rel = 0.0
    for i in range(100):
        d = random_data(rng, 2 if i % 2 else 3)
        t = rng.uniform(0.2, 1.2)
        e = 1e-4
        fd = (variation(d, e, t) - variation(d, -e, t)) / (2 * e)
        J = jacobi_field(d, t)
        rel = max(rel, np.linalg.norm(decompose(d.geodesic(t), fd).horizontal - J.horizontal_part)
                  / np.linalg.norm(J.field_value))
    planar = 0.0
    for _ in range(20):
        d = random_data(rng, 2)
        for t in np.linspace(0, 1.5, 7):
            planar = max(planar, np.linalg.norm(jacobi_field_2d(d, t).field_value - jacobi_field(d, t).field_value))
    planar_orders, spatial_orders, spatial_res = [], [], []
    for _ in range(5):
        planar_orders += residual_orders(random_data(rng, 2))[1]
        res, orders = residual_orders(random_data(rng, 3))
        spatial_orders += orders
        spatial_res.append(res[-1])
    orders_ok = min(planar_orders + spatial_orders) >= 1.8
    ok = rel < 1e-5 and planar < 1e-8 and orders_ok
    record(4, ok, f"variation oracle rel {rel:.1e} (100 cases, horizontal parts); planar vs general "
                  f"{planar:.1e}; residual order m=2 min {min(planar_orders):.2f}, m=3 min "
                  f"{min(spatial_orders):.2f} (m=3 residual stays at {min(spatial_res):.2f}-"
                  f"{max(spatial_res):.2f} under refinement, see notes)")
    assert ok


# 5 --------------------------------------------------------------------------

def test_criterion_05_gradient():
    rng = rng_for(5)
    worst = 0.0
    for _ in range(50):
        t, Q, _, _ = geodesic_data(rng, m=3, k=10, N=6, sigma=0.05)
        x = Q[0] + 0.1 * rng.standard_normal(Q[0].shape)
        y = Q[-1] + 0.1 * rng.standard_normal(Q[0].shape)
        x, y = x / np.linalg.norm(x), y / np.linalg.norm(y)
        gx, gy = gradient(x, y, (t, Q))
        for which, base, g in ((0, x, gx), (1, y, gy)):
            for _ in range(10):
                d = horizontal(base, rng.standard_normal(base.shape))
                d /= np.linalg.norm(d)
                e = 1e-5
                plus, minus = [x, y], [x, y]
                plus[which] = sphere_exp(base, e * d)
                minus[which] = sphere_exp(base, -e * d)
                fd = (objective(*plus, (t, Q)) - objective(*minus, (t, Q))) / (2 * e)
                worst = max(worst, abs(fd - np.vdot(g, d)) / max(abs(fd), np.linalg.norm(g)))
    ok = worst < 1e-5
    record(5, ok, f"50 instances x 10 directions x 2 arguments: max relative error {worst:.1e}")
    assert ok


# 6 --------------------------------------------------------------------------

def test_criterion_06_regression_recovery():
    rng = rng_for(6)
    dist = r2_gap = 0.0
    r2_ok = True
    for _ in range(10):
        t, Q, x, y = geodesic_data(rng, m=3, k=10, N=6, spread=rng.uniform(0.2, 0.8))
        model = fit((t, Q))
        dist = max(dist, shape_dist(model.x_star, x), shape_dist(model.point(1.0), y))
        r2_gap = max(r2_gap, 1 - model.r_squared)
    base_gap = 0.0
    for _ in range(3):
        t, Q, _, _ = geodesic_data(rng, m=3, k=10, N=6, sigma=0.05)
        model = fit((t, Q))
        base = baseline_fit(t, Q, rng, restarts=20)
        base_gap = max(base_gap, abs(model.objective - base))
        G = min_sum_squared(Q)
        chord = max(0.0, 1 - objective(*chord_initialization(t, Q), (t, Q)) / G)
        r2_ok &= 0 <= model.r_squared <= 1 and model.r_squared >= chord
    for _ in range(10):
        t, Q, _, _ = geodesic_data(rng, m=3, k=10, N=6, sigma=rng.uniform(0.05, 0.3))
        model = fit((t, Q))
        chord = max(0.0, 1 - objective(*chord_initialization(t, Q), (t, Q)) / min_sum_squared(Q))
        r2_ok &= 0 <= model.r_squared <= 1 and model.r_squared >= chord
    ok = dist < 1e-6 and r2_gap <= 1e-9 and base_gap < 1e-6 and r2_ok
    record(6, ok, f"noiseless: endpoint dist {dist:.1e}, 1-R2 {r2_gap:.1e}; noisy: |F - baseline(20 "
                  f"restarts)| {base_gap:.1e}; R2 in [0,1] and >= chord: {r2_ok}")
    assert ok


# 7 --------------------------------------------------------------------------

def test_criterion_07_frechet_mean():
    rng = rng_for(7)
    stat = mid = var = 0.0
    for _ in range(5):
        x = random_preshape(rng, 3, 10)
        Q = [random_rotation(rng, 3) @ nearby(rng, x, rng.uniform(0.02, 0.2)) for _ in range(20)]
        res = frechet_mean(Q)
        stat = max(stat, np.linalg.norm(sum(shape_log(res.mean, q) for q in Q)))
        G = sum(naive_shape_dist(res.mean, q) ** 2 for q in Q)
        var = max(var, abs(res.total_variance - G / len(Q)))
    for i in range(10):
        m = 2 + i % 2
        x = random_preshape(rng, m, 9)
        y = random_rotation(rng, m) @ nearby(rng, x, rng.uniform(0.1, 0.9))
        mid = max(mid, shape_dist(frechet_mean([x, y]).mean, slerp(0.5, x, omega(x, y))))
    ok = stat < 1e-10 and mid < 1e-8 and var < 1e-10
    record(7, ok, f"stationarity {stat:.1e}, two-point midpoint {mid:.1e}, variance identity {var:.1e}")
    assert ok


# 8 --------------------------------------------------------------------------

def test_criterion_08_statistics():
    rng = rng_for(8)
    k = 40
    shift = np.zeros((k, 3))
    shift[:, 0] = np.linspace(0.2, 1.3, k)
    a = rng.standard_normal((15, k, 3))
    b = rng.standard_normal((15, k, 3)) + shift[None]
    res = hotelling_t2(a, b)
    oracle = permutation_t2_pvalues(a, b, 100_000, rng)
    band = (res.per_vertex_p >= 0.01) & (res.per_vertex_p <= 0.2)
    perm_gap = float(np.max(np.abs(res.per_vertex_p[band] - oracle[band]))) if band.any() else math.inf
    bh_ok = True
    for _ in range(500):
        n = int(rng.integers(1, 60))
        p = rng.uniform(0, 1, n) ** rng.uniform(1, 6)
        q = float(rng.uniform(0.001, 0.3))
        bh_ok &= list(bh_fdr(p, q)) == step_up(list(p), q)
    same = hotelling_t2(a, a.copy())
    ok = band.sum() >= 5 and perm_gap <= 0.02 and bh_ok and not same.rejected.any()
    record(8, ok, f"Hotelling vs 1e5 permutations on {int(band.sum())} vertices with p in [0.01,0.2]: "
                  f"max gap {perm_gap:.4f}; BH matches rule on 500 vectors: {bh_ok}; "
                  f"identical groups reject {int(same.rejected.sum())}")
    assert ok


# 9 --------------------------------------------------------------------------

def test_criterion_09_performance():
    rng = rng_for(9)
    t, Q, _, _ = geodesic_data(rng, m=3, k=8988, N=6, spread=0.4, sigma=0.05)
    cfg = RegressionConfig(compute_r_squared=False)
    t0 = time.perf_counter()
    model = fit((t, Q), cfg)
    analytic = time.perf_counter() - t0
    budget = 10 * analytic
    t0 = time.perf_counter()
    slow = fit((t, Q), RegressionConfig(gradient="finite_difference", time_budget=budget,
                                        compute_r_squared=False))
    fd_elapsed = time.perf_counter() - t0
    # the variant is stopped at its budget; it beats the analytic solver only
    # if it converged within it
    fd_done = slow.solver_report.converged
    n_coords = 2 * Q[0].size
    t0 = time.perf_counter()
    for _ in range(20):
        objective(model.x_star, model.y_star, (t, Q))
    per_grad = (time.perf_counter() - t0) / 20 * 2 * n_coords
    grad_ok = model.solver_report.grad_norm < 1e-6 * len(t)
    ok = grad_ok and analytic <= 5 and not fd_done
    record(9, ok, f"k=8988 fit {analytic:.2f}s, grad norm {model.solver_report.grad_norm:.1e}; "
                  f"finite-difference variant unconverged after {fd_elapsed:.2f}s (10x budget), "
                  f"one such gradient costs ~{per_grad:.0f}s, i.e. ~{per_grad / analytic:.0f}x a full fit")
    assert ok


# 10 -------------------------------------------------------------------------

def run_pipeline(manifest, via, out, jobs):
    codes = []
    for cmd in (["regress", "--n-perms", "19"], ["transport", "--via", str(via)], ["group-test"]):
        codes.append(main([cmd[0], str(manifest), *cmd[1:], "--seed", "17", "--jobs", str(jobs),
                           "--q", "0.05", "--out", str(out)]))
    files = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    return codes, files


def test_criterion_10_pipeline(tmp_path):
    rng = rng_for(10)
    base = random_preshape(rng, 3, 12)
    common = random_horizontal(rng, base, 0.2)
    effects = {"HH": common, "HD": common + random_horizontal(rng, base, 0.05),
               "DD": common + random_horizontal(rng, base, 0.1)}
    manifest = write_manifest(tmp_path / "study", {"HH": 6, "HD": 6, "DD": 6}, rng, base=base,
                              effects=effects)
    via = tmp_path / "study" / "HD00_1.txt"
    codes1, files1 = run_pipeline(manifest, via, tmp_path / "run1", jobs=1)
    codes2, files2 = run_pipeline(manifest, via, tmp_path / "run2", jobs=2)
    identical = files1 == files2 and len(files1) > 0
    report = json.loads(files1["transport.json"])["tests"]["holonomy"]
    recount_ok = True
    agreements = []
    for entry in report:
        a, b = entry["rejected_direct"], entry["rejected_via"]
        mine = 100.0 * sum(x == y for x, y in zip(a, b)) / len(a)
        recount_ok &= abs(mine - entry["agreement_percent"]) < 1e-12
        agreements.append(entry["agreement_percent"])
    ok = codes1 == [0, 0, 0] and codes2 == [0, 0, 0] and identical and recount_ok and len(report) == 3
    record(10, ok, f"{len(files1)} output files byte-identical across runs (jobs 1 vs 2): {identical}; "
                   f"holonomy recount matches: {recount_ok}; agreement "
                   f"{', '.join(f'{p:.1f}%' for p in agreements)}")
    assert ok


if __name__ == "__main__":
    import tempfile

    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion"):
            try:
                if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except AssertionError:
                pass
            print(RESULTS[-1])
