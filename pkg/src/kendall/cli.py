"""Command-line front end.

Commands: ``align``, ``mean``, ``regress``, ``transport``, ``tpca``,
``group-test`` and ``perm-test``.  Exit codes: 0 success, 2 input error,
3 numerical failure, 4 partial failure (some subjects failed).
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import GroupTooSmall, InvalidInput, KendallError, WrongDimension
from .io import (
    ResultBundle,
    atomic_write,
    config_hash,
    load_manifest,
    parse_landmark_file,
    write_landmark_file,
)
from .preshape import to_landmarks, to_preshape
from .regress import SOLVERS, RegressionConfig, fit, min_sum_squared, permutation_test
from .shape import omega
from .stats import frechet_mean, hotelling_t2, tangent_pca, velocity_displacements
from .transport import Trajectory, transport_trajectory, transport_velocity

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
SEED_SPLITTER = "numpy.random.SeedSequence(seed, spawn_key=(stream, index))"
STREAM_PERMUTATION, STREAM_BOOTSTRAP = 0, 1


@dataclass(frozen=True)
class RunOptions:
    seed: int = 0
    jobs: int = 1
    tol: float | None = None
    solver: str = "gradient_descent_armijo"
    n_perms: int = 0
    bootstrap: int = 2000
    q: float = 0.01
    reference_group: str | None = None
    via: str | None = None
    pairs: tuple = ()
    components: int = 3
    baseline_only: bool = False

    def regression_config(self):
        return RegressionConfig(grad_tol=self.tol, solver=self.solver)

    def provenance(self, manifest=None):
        cfg = {k: v for k, v in asdict(self).items() if k != "jobs"}
        out = {
            "tool": "kendall",
            "version": __version__,
            "seed": self.seed,
            "seed_splitter": SEED_SPLITTER,
            "config": cfg,
            "config_hash": config_hash(cfg),
        }
        if manifest is not None:
            out["manifest_sha256"] = manifest.source_hash
        return out


def _seed(seed, stream, index):
    return np.random.SeedSequence(seed, spawn_key=(stream, index))


def _pmap(fn, items, jobs):
    items = list(items)
    if jobs and jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


@dataclass
class _Subject:
    entry: object
    trajectory: Trajectory
    size_scales: list = field(default_factory=list)


def _load_shape(path):
    return to_preshape(parse_landmark_file(path))


def _load_subjects(manifest):
    """Parse every referenced file up front so input errors surface first."""
    subjects = []
    dims = None
    for e in manifest.subjects:
        pres = [_load_shape(o.path) for o in e.observations]
        for p in pres:
            if dims is None:
                dims = p.matrix.shape
            elif p.matrix.shape != dims:
                raise WrongDimension(
                    f"{e.subject_id}: landmark array {p.k} x {p.m} differs from {dims[1] + 1} x {dims[0]}"
                )
        traj = Trajectory.from_observations(
            e.subject_id, [o.time for o in e.observations], [p.matrix for p in pres], group=e.group
        )
        subjects.append(_Subject(e, traj, [p.size_scale for p in pres]))
    return subjects


def _fit_all(subjects, opts):
    cfg = opts.regression_config()

    def work(item):
        i, s = item
        summary = {
            "subject_id": s.entry.subject_id,
            "group": s.entry.group,
            "times": s.trajectory.original_times,
            "time_offset": s.trajectory.time_offset,
            "time_scale": s.trajectory.time_scale,
        }
        try:
            total = min_sum_squared(s.trajectory.shapes)
            model = fit(s.trajectory, cfg, total_variance=total)
            summary.update(
                r_squared=model.r_squared,
                objective=model.objective,
                residuals=model.residuals,
                iterations=model.solver_report.iterations,
                grad_norm=model.solver_report.grad_norm,
                converged=model.solver_report.converged,
            )
            if opts.n_perms:
                summary["p_value"] = permutation_test(
                    s.trajectory, opts.n_perms, _seed(opts.seed, STREAM_PERMUTATION, i), cfg
                )
            return summary, model
        except KendallError as exc:
            summary["error"] = f"{type(exc).__name__}: {exc}"
            return summary, None

    return _pmap(work, enumerate(subjects), opts.jobs)


def _bootstrap_median(values, n_boot, seed_seq):
    vals = np.asarray(values, dtype=float)
    med = float(np.median(vals))
    if vals.size < 2 or n_boot < 1:
        return med, [med, med]
    rng = np.random.default_rng(seed_seq)
    idx = rng.integers(0, vals.size, size=(n_boot, vals.size))
    meds = np.median(vals[idx], axis=1)
    return med, [float(np.percentile(meds, 2.5)), float(np.percentile(meds, 97.5))]


def _group_summaries(summaries, opts):
    groups = {}
    names = sorted({s["group"] for s in summaries})
    for gi, g in enumerate(names):
        r2 = [s["r_squared"] for s in summaries if s["group"] == g and "error" not in s]
        entry = {"n_subjects": sum(1 for s in summaries if s["group"] == g), "n_fitted": len(r2)}
        if r2:
            med, ci = _bootstrap_median(r2, opts.bootstrap, _seed(opts.seed, STREAM_BOOTSTRAP, gi))
            entry.update(
                median_r_squared=med,
                ci95=ci,
                ci_method=f"bootstrap percentile, {opts.bootstrap} resamples",
            )
        groups[g] = entry
    return groups


def _residual_csv(summaries):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "time", "distance"])
    for s in summaries:
        if "error" in s:
            continue
        for t, d in zip(s["times"], s["residuals"]):
            w.writerow([s["subject_id"], repr(float(t)), repr(float(d))])
    return buf.getvalue()


def _status(summaries):
    failed = sum(1 for s in summaries if "error" in s)
    if failed == 0:
        return EXIT_OK
    return EXIT_NUMERIC if failed == len(summaries) else EXIT_PARTIAL


def run_regress(manifest_path, out_dir, opts: RunOptions, command="regress"):
    manifest = load_manifest(manifest_path)
    subjects = _load_subjects(manifest)
    results = _fit_all(subjects, opts)
    summaries = [s for s, _ in results]
    bundle = ResultBundle(
        command=command,
        subjects=summaries,
        groups=_group_summaries(summaries, opts),
        provenance=opts.provenance(manifest),
    )
    out = Path(out_dir)
    bundle.write(out / f"{command.replace('-', '_')}.json")
    atomic_write(out / f"{command.replace('-', '_')}_residuals.csv", _residual_csv(summaries))
    return bundle, _status(summaries)


def _reference(manifest, subjects, opts):
    if manifest.reference is not None:
        return _load_shape(manifest.reference).matrix, {"source": "manifest", "file": manifest.reference.name}
    pool = [s for s in subjects if opts.reference_group in (None, s.entry.group)]
    if not pool:
        raise InvalidInput(f"reference group {opts.reference_group!r} has no subjects")
    res = frechet_mean([s.trajectory.shapes[0] for s in pool], tol=opts.tol or 1e-10)
    desc = {
        "source": "frechet_mean_of_baselines",
        "group": opts.reference_group,
        "n_shapes": len(pool),
        "iterations": res.iterations,
        "final_residual": res.final_residual,
    }
    return res.mean, desc


def _load_via(opts, subjects):
    """Intermediate shape per subject: a JSON map subject_id -> file, or one
    landmark file for every subject."""
    if opts.via is None:
        return {}
    path = Path(opts.via)
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInput(f"cannot read via map {path}: {exc}") from None
        known = {s.entry.subject_id for s in subjects}
        out = {}
        for sid, p in doc.items():
            if sid not in known:
                raise InvalidInput(f"via map names unknown subject {sid!r}")
            out[sid] = _load_shape(path.parent / p).matrix
        return out
    shape = _load_shape(path).matrix
    return {s.entry.subject_id: shape for s in subjects}


def _transport_all(subjects, results, ref, opts, out_dir, write_files=True):
    via = _load_via(opts, subjects)

    def work(item):
        s, (summary, model) = item
        sid = s.entry.subject_id
        entry = {"subject_id": sid, "group": s.entry.group, "times": s.trajectory.original_times}
        if model is None:
            entry["error"] = summary.get("error", "fit failed")
            return entry, None, None
        try:
            vel = transport_velocity(model.x_star, model.velocity, ref)
            moved = transport_trajectory(s.trajectory, ref)
            vel_via = None
            if sid in via:
                mid = via[sid]
                vel_via = transport_velocity(mid, transport_velocity(model.x_star, model.velocity, mid), ref)
                entry["via_difference_norm"] = float(np.linalg.norm(vel_via - vel))
            entry["velocity_norm"] = float(np.linalg.norm(vel))
            if write_files:
                files = []
                for j, q in enumerate(moved.shapes):
                    name = f"transport/{sid}_obs{j}.txt"
                    write_landmark_file(Path(out_dir) / name, to_landmarks(q))
                    files.append(name)
                vname = f"transport/{sid}_velocity.txt"
                write_landmark_file(Path(out_dir) / vname, velocity_displacements(vel))
                entry["trajectory_files"] = files
                entry["velocity_file"] = vname
            return entry, vel, vel_via
        except KendallError as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
            return entry, None, None

    return _pmap(work, list(zip(subjects, results)), opts.jobs), bool(via)


def _group_arrays(subjects, moved, use_via=False):
    groups = {}
    for s, (entry, vel, vel_via) in zip(subjects, moved):
        v = vel_via if (use_via and vel_via is not None) else vel
        if v is None:
            continue
        groups.setdefault(s.entry.group, []).append(velocity_displacements(v))
    return {g: np.stack(vs) for g, vs in groups.items()}


def _parse_pairs(opts, available):
    if opts.pairs:
        pairs = list(opts.pairs)
    else:
        pairs = list(itertools.combinations(sorted(available), 2))
    for a, b in pairs:
        for g in (a, b):
            if g not in available:
                raise InvalidInput(f"group {g!r} is not present in the manifest (groups: {sorted(available)})")
        if a == b:
            raise InvalidInput(f"pair {a}:{b} compares a group with itself")
    return pairs


def run_transport(manifest_path, out_dir, opts: RunOptions):
    manifest = load_manifest(manifest_path)
    subjects = _load_subjects(manifest)
    ref, ref_desc = _reference(manifest, subjects, opts)
    out = Path(out_dir)
    write_landmark_file(out / "transport/reference.txt", to_landmarks(ref))
    results = _fit_all(subjects, opts)
    moved, has_via = _transport_all(subjects, results, ref, opts, out)
    tests = {"reference": dict(ref_desc, file="transport/reference.txt")}
    if has_via:
        tests["holonomy"] = _holonomy(subjects, moved, opts)
    entries = [e for e, _, _ in moved]
    bundle = ResultBundle("transport", subjects=entries, tests=tests, provenance=opts.provenance(manifest))
    bundle.write(out / "transport.json")
    return bundle, _status(entries)


def _holonomy(subjects, moved, opts):
    direct = _group_arrays(subjects, moved)
    via = _group_arrays(subjects, moved, use_via=True)
    report = []
    for a, b in _parse_pairs(opts, set(direct)):
        ra = hotelling_t2(direct[a], direct[b], q=opts.q)
        rb = hotelling_t2(via[a], via[b], q=opts.q)
        same = ra.rejected == rb.rejected
        report.append({
            "pair": f"{a}:{b}",
            "agreement_percent": 100.0 * float(np.mean(same)),
            "rejected_direct": ra.rejected,
            "rejected_via": rb.rejected,
        })
    return report


def _vertex_csv(res):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vertex", "t2", "p", "rejected", "effect_magnitude", "singular"])
    for i in range(res.per_vertex_t2.size):
        w.writerow([i, repr(float(res.per_vertex_t2[i])), repr(float(res.per_vertex_p[i])),
                    int(res.rejected[i]), repr(float(res.effect_magnitude[i])), int(res.singular[i])])
    return buf.getvalue()


def run_group_test(manifest_path, out_dir, opts: RunOptions):
    manifest = load_manifest(manifest_path)
    groups = set(manifest.groups)
    if len(groups) < 2:
        raise InvalidInput("group tests need at least two groups")
    pairs = _parse_pairs(opts, groups)
    subjects = _load_subjects(manifest)
    m = subjects[0].trajectory.shapes.shape[1]
    for g in groups:
        n = sum(1 for s in subjects if s.entry.group == g)
        if any(g in p for p in pairs) and n < m + 2:
            raise GroupTooSmall(f"group {g!r} has {n} subjects; need at least m+2 = {m + 2}")
    ref, ref_desc = _reference(manifest, subjects, opts)
    out = Path(out_dir)
    results = _fit_all(subjects, opts)
    moved, _ = _transport_all(subjects, results, ref, opts, out, write_files=False)
    arrays = _group_arrays(subjects, moved)
    tests = {"reference": ref_desc, "pairs": []}
    for a, b in pairs:
        if a not in arrays or b not in arrays:
            raise KendallError(f"no transported velocities for pair {a}:{b}")
        res = hotelling_t2(arrays[a], arrays[b], q=opts.q)
        name = f"group_test_{a}_{b}.csv"
        atomic_write(out / name, _vertex_csv(res))
        tests["pairs"].append({
            "pair": f"{a}:{b}",
            "n": [int(arrays[a].shape[0]), int(arrays[b].shape[0])],
            "q": opts.q,
            "percent_significant": 100.0 * float(np.mean(res.rejected)),
            "n_singular_vertices": int(res.singular.sum()),
            "table": name,
        })
    entries = [e for e, _, _ in moved]
    bundle = ResultBundle("group-test", subjects=entries, tests=tests, provenance=opts.provenance(manifest))
    bundle.write(out / "group_test.json")
    return bundle, _status(entries)


def _all_shapes(subjects, baseline_only):
    shapes, labels = [], []
    for s in subjects:
        for j, (t, q) in enumerate(zip(s.trajectory.original_times, s.trajectory.shapes)):
            if baseline_only and j > 0:
                break
            shapes.append(q)
            labels.append({"subject_id": s.entry.subject_id, "time": t})
    return shapes, labels


def run_mean(manifest_path, out_dir, opts: RunOptions):
    manifest = load_manifest(manifest_path)
    subjects = _load_subjects(manifest)
    if opts.reference_group is not None:
        subjects = [s for s in subjects if s.entry.group == opts.reference_group]
        if not subjects:
            raise InvalidInput(f"group {opts.reference_group!r} has no subjects")
    shapes, _ = _all_shapes(subjects, opts.baseline_only)
    res = frechet_mean(shapes, tol=opts.tol or 1e-10)
    out = Path(out_dir)
    write_landmark_file(out / "mean.txt", to_landmarks(res.mean))
    tests = {"frechet_mean": {
        "file": "mean.txt",
        "n_shapes": len(shapes),
        "total_variance": res.total_variance,
        "iterations": res.iterations,
        "final_residual": res.final_residual,
        "method": res.method,
    }}
    bundle = ResultBundle("mean", tests=tests, provenance=opts.provenance(manifest))
    bundle.write(out / "mean.json")
    return bundle, EXIT_OK


def run_tpca(manifest_path, out_dir, opts: RunOptions):
    manifest = load_manifest(manifest_path)
    subjects = _load_subjects(manifest)
    ref, ref_desc = _reference(manifest, subjects, opts)
    shapes, labels = _all_shapes(subjects, opts.baseline_only)
    pca = tangent_pca(shapes, ref, opts.components)
    out = Path(out_dir)
    files = []
    for i, c in enumerate(pca.components):
        name = f"tpca/component_{i}.txt"
        write_landmark_file(out / name, velocity_displacements(c))
        files.append(name)
    scores = [dict(lab, scores=row) for lab, row in zip(labels, pca.scores)]
    tests = {"tpca": {"reference": ref_desc, "explained": pca.explained, "component_files": files}}
    bundle = ResultBundle("tpca", subjects=scores, tests=tests, provenance=opts.provenance(manifest))
    bundle.write(out / "tpca.json")
    return bundle, EXIT_OK


def run_align(in_path, out_path, opts: RunOptions, reference=None):
    """Align one landmark file, or every observation of a manifest, to a reference.

    Output coordinates are centered and scaled to unit size.
    """
    in_path = Path(in_path)
    out = Path(out_path)
    if in_path.suffix.lower() == ".json":
        manifest = load_manifest(in_path)
        subjects = _load_subjects(manifest)
        if reference is not None:
            ref = _load_shape(reference).matrix
        elif manifest.reference is not None:
            ref = _load_shape(manifest.reference).matrix
        else:
            shapes, _ = _all_shapes(subjects, False)
            ref = frechet_mean(shapes, tol=opts.tol or 1e-10).mean
        doc = {"schema_version": 1, "subjects": []}
        for s in subjects:
            obs = []
            for j, (t, q) in enumerate(zip(s.trajectory.original_times, s.trajectory.shapes)):
                name = f"{s.entry.subject_id}_obs{j}.txt"
                write_landmark_file(out / name, to_landmarks(omega(ref, q)))
                obs.append({"time": t, "path": name})
            doc["subjects"].append({"subject_id": s.entry.subject_id, "group": s.entry.group, "observations": obs})
        atomic_write(out / "manifest.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")
        bundle = ResultBundle("align", tests={"aligned": sum(len(s["observations"]) for s in doc["subjects"])},
                              provenance=opts.provenance(manifest))
        return bundle, EXIT_OK
    x = _load_shape(in_path).matrix
    if reference is not None:
        x = omega(_load_shape(reference).matrix, x)
    write_landmark_file(out, to_landmarks(x))
    return ResultBundle("align", tests={"aligned": 1}, provenance=opts.provenance()), EXIT_OK


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="top-level random seed")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads")
    common.add_argument("--tol", type=float, default=None, help="gradient / Karcher residual tolerance")
    common.add_argument("--solver", choices=SOLVERS, default=SOLVERS[0])
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="stdout summary format")
    common.add_argument("--reference-group", default=None, help="group whose baselines define the reference")
    common.add_argument("--baseline-only", action="store_true", help="use only the first shape of each subject")
    common.add_argument("--q", type=float, default=0.01, help="false discovery rate for vertex tests")

    p = argparse.ArgumentParser(prog="kendall", description="Shape trajectories in Kendall shape space")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    a = sub.add_parser("align", parents=[common], help="align landmark data to a reference")
    a.add_argument("input")
    a.add_argument("output")
    a.add_argument("--reference", default=None)
    sub.add_parser("mean", parents=[common], help="Fréchet mean").add_argument("manifest")
    r = sub.add_parser("regress", parents=[common], help="geodesic regression per subject")
    r.add_argument("manifest")
    r.add_argument("--n-perms", type=int, default=0)
    r.add_argument("--bootstrap", type=int, default=2000)
    t = sub.add_parser("transport", parents=[common], help="transport trajectories to a reference")
    t.add_argument("manifest")
    t.add_argument("--via", default=None, help="intermediate shape(s) for a second transport path")
    t.add_argument("--pairs", default=None)
    c = sub.add_parser("tpca", parents=[common], help="tangent PCA at the reference")
    c.add_argument("manifest")
    c.add_argument("--components", type=int, default=3)
    g = sub.add_parser("group-test", parents=[common], help="vertex-wise group comparison")
    g.add_argument("manifest")
    g.add_argument("--pairs", default=None, help="comma-separated pairs such as HH:HD,HH:DD")
    pt = sub.add_parser("perm-test", parents=[common], help="regression with permutation p-values")
    pt.add_argument("manifest")
    pt.add_argument("--n-perms", type=int, default=1000)
    pt.add_argument("--bootstrap", type=int, default=2000)
    return p


def _pairs(text):
    if not text:
        return ()
    out = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 2 or not all(parts):
            raise InvalidInput(f"malformed pair {item!r}; expected A:B")
        out.append((parts[0], parts[1]))
    return tuple(out)


def _summary_text(bundle, fmt, status):
    if fmt == "json":
        doc = {"command": bundle.command, "status": status, "groups": bundle.groups,
               "n_subjects": len(bundle.subjects),
               "n_failed": sum(1 for s in bundle.subjects if isinstance(s, dict) and "error" in s)}
        return json.dumps(doc, sort_keys=True, default=float) + "\n"
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "group", "r_squared", "error"])
    for s in bundle.subjects:
        if isinstance(s, dict) and "subject_id" in s:
            w.writerow([s["subject_id"], s.get("group", ""), s.get("r_squared", ""), s.get("error", "")])
    return buf.getvalue()


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        opts = RunOptions(
            seed=args.seed,
            jobs=max(1, args.jobs),
            tol=args.tol,
            solver=args.solver,
            n_perms=getattr(args, "n_perms", 0),
            bootstrap=getattr(args, "bootstrap", 2000),
            q=args.q,
            reference_group=args.reference_group,
            via=getattr(args, "via", None),
            pairs=_pairs(getattr(args, "pairs", None)),
            components=getattr(args, "components", 3),
            baseline_only=args.baseline_only,
        )
        cmd = args.command
        if cmd == "align":
            bundle, status = run_align(args.input, args.output, opts, args.reference)
        elif cmd == "mean":
            bundle, status = run_mean(args.manifest, args.out, opts)
        elif cmd == "regress":
            bundle, status = run_regress(args.manifest, args.out, opts)
        elif cmd == "perm-test":
            if opts.n_perms < 19:
                raise InvalidInput("--n-perms must be at least 19")
            bundle, status = run_regress(args.manifest, args.out, opts, command="perm-test")
        elif cmd == "transport":
            bundle, status = run_transport(args.manifest, args.out, opts)
        elif cmd == "tpca":
            bundle, status = run_tpca(args.manifest, args.out, opts)
        else:
            bundle, status = run_group_test(args.manifest, args.out, opts)
    except InvalidInput as exc:
        print(f"kendall: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except KendallError as exc:
        print(f"kendall: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    sys.stdout.write(_summary_text(bundle, args.format, status))
    return status


if __name__ == "__main__":
    sys.exit(main())
