"""Command-line interface: ``python -m multiscale_ot <command> ...``.

blur and reach are in the units of the input coordinates (mm for fibers and
density maps).  Exit codes: 0 success, 2 usage error, 3 data error, 4
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import tracemalloc
from collections import Counter

import numpy as np

from . import _kernels, io
from .exact import exact_ot
from .gradients import BarycenterConfig, barycenter, density_barycenter, upsample
from .labeling import OUTLIER, LabelSet, classify, resolve_flips, transfer_labels
from .measures import (
    CostSpec,
    DiscreteMeasure,
    FiberSet,
    density_to_measure,
    encode_fibers,
    flip_augment,
)
from .multiscale import DEFAULT_THETA, kmeans_coarsen, multiscale_sinkhorn
from .sinkhorn import NumericalError, SolverParams, divergence, symmetric_sinkhorn

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# above this many pairs the solver switches to the multiscale path by default
AUTO_MULTISCALE_PAIRS = 4_000_000


class UsageError(Exception):
    pass


def _positive(name):
    def conv(s):
        try:
            v = float(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {s!r}") from None
        if not v > 0 or not math.isfinite(v):
            raise argparse.ArgumentTypeError(f"{name} must be positive and finite, got {s!r}")
        return v
    return conv


def _reach(s):
    if s.lower() in ("inf", "infinity"):
        return math.inf
    return _positive("--reach")(s)


def _unit_interval(name):
    def conv(s):
        v = _positive(name)(s)
        if not v < 1:
            raise argparse.ArgumentTypeError(f"{name} must lie in (0, 1), got {s!r}")
        return v
    return conv


def _exponent(s):
    v = _positive("--p")(s)
    if not 1 <= v <= 2:
        raise argparse.ArgumentTypeError(f"--p must lie in [1, 2], got {s!r}")
    return v


def _count(name, minimum=1):
    def conv(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {s!r}") from None
        if v < minimum:
            raise argparse.ArgumentTypeError(f"{name} must be >= {minimum}, got {v}")
        return v
    return conv


def _sizes(s):
    try:
        vals = [int(t) for t in s.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--sizes must be comma-separated integers, got {s!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("--sizes must list positive atom counts")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--blur", type=_positive("--blur"), help="final blur scale (input units)")
    common.add_argument("--reach", type=_reach, help="reach scale or 'inf'")
    common.add_argument("--p", type=_exponent, default=2.0, help="cost exponent in [1, 2]")
    common.add_argument("--scaling", type=_unit_interval("--scaling"), default=0.9,
                        help="annealing ratio q")
    common.add_argument("--final-iters", type=_count("--final-iters", 0), default=0,
                        help="extra iterations at the final blur")
    common.add_argument("--clusters", type=_count("--clusters", 0), default=None,
                        help="K-means clusters per measure; 0 forces the dense solver")
    common.add_argument("--theta", type=_positive("--theta"), default=DEFAULT_THETA,
                        help="truncation threshold in units of eps")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=_count("--threads"), default=os.cpu_count() or 1)
    common.add_argument("--out", help="output file (standard output if omitted)")
    common.add_argument("--format", choices=("text", "json"), default="text")
    common.add_argument("--resample", type=_count("--resample", 2), default=20,
                        help="points per fiber after resampling")

    ap = argparse.ArgumentParser(prog="multiscale-ot", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("divergence", parents=[common], help="Sinkhorn divergence between two inputs")
    c.add_argument("source")
    c.add_argument("target")

    c = sub.add_parser("plan", parents=[common], help="write plan entries 'i j mass'")
    c.add_argument("source")
    c.add_argument("target")
    c.add_argument("--threshold", type=float, default=1e-9,
                   help="emit entries above threshold * total mass")

    c = sub.add_parser("transfer", parents=[common], help="transfer atlas labels to subject fibers")
    c.add_argument("subject")
    c.add_argument("atlas")
    c.add_argument("labels")
    c.add_argument("--tau", type=_unit_interval("--tau"), default=0.5,
                   help="row-mass threshold below which a fiber is an outlier")

    c = sub.add_parser("barycenter", parents=[common], help="barycenter of density maps or point clouds")
    c.add_argument("inputs", nargs="+")
    c.add_argument("--upsample", type=_count("--upsample"), default=1)
    c.add_argument("--iterations", type=_count("--iterations", 0), default=100)
    c.add_argument("--step", type=_positive("--step"), default=1.0)

    c = sub.add_parser("bench", parents=[common], help="dense vs multiscale timings on random clouds")
    c.add_argument("--sizes", type=str, default="1000")
    c.add_argument("--dim", type=_count("--dim"), default=3)
    c.add_argument("--skip-dense", action="store_true", help="only run the multiscale path")

    c = sub.add_parser("verify", parents=[common], help="compare the divergence with exact transport")
    c.add_argument("source")
    c.add_argument("target")

    c = sub.add_parser("cluster", parents=[common], help="K-means coarsening of one input")
    c.add_argument("source")
    return ap


# --- helpers --------------------------------------------------------------


def _kind(path):
    for _, toks in io._lines(path):
        return toks[0] if toks[0] in ("fiber", "density") else "points"
    raise io.ParseError(path, 0, "empty file")


def load_measure(path, resample=20) -> DiscreteMeasure:
    """Read a point cloud, fiber or density file into a measure."""
    io.check_readable(path)
    kind = _kind(path)
    if kind == "fiber":
        return encode_fibers(FiberSet(io.read_fibers(path), resample))
    if kind == "density":
        return density_to_measure(io.read_density(path))
    return io.read_points(path)


def _params(args, blur_default=None, reach_default=math.inf) -> SolverParams:
    blur = args.blur if args.blur is not None else blur_default
    if blur is None:
        raise UsageError("--blur is required for this command")
    reach = args.reach if args.reach is not None else reach_default
    return SolverParams(blur=blur, reach=reach, cost=CostSpec(args.p), scaling=args.scaling,
                        final_iters=args.final_iters)


def _solve(a, b, params, args):
    k = args.clusters
    if k is None:
        k = 0 if a.n * b.n <= AUTO_MULTISCALE_PAIRS else None
        if k is None:
            return multiscale_sinkhorn(a, b, params, seed=args.seed, theta=args.theta)
    if k == 0:
        return symmetric_sinkhorn(a, b, params)
    return multiscale_sinkhorn(a, b, params, K_a=min(k, a.n), K_b=min(k, b.n),
                               seed=args.seed, theta=args.theta)


class _Output:
    def __init__(self, path):
        self.path = path
        self.fh = open(path, "w", encoding="utf-8") if path else sys.stdout

    def __enter__(self):
        return self.fh

    def __exit__(self, *exc):
        if self.path:
            self.fh.close()


def _emit(args, record, text):
    with _Output(args.out) as fh:
        if args.format == "json":
            fh.write(json.dumps(record) + "\n")
        else:
            fh.write(text + "\n")


def _same_dim(a, b, pa, pb):
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {pa} is {a.dim}-D, {pb} is {b.dim}-D")


# --- commands -------------------------------------------------------------


def cmd_divergence(args):
    a = load_measure(args.source, args.resample)
    b = load_measure(args.target, args.resample)
    _same_dim(a, b, args.source, args.target)
    params = _params(args)
    tracemalloc.start()
    t0 = time.perf_counter()
    duals = _solve(a, b, params, args)
    value = divergence(a, b, params, duals)
    seconds = time.perf_counter() - t0
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    if not math.isfinite(value):
        raise NumericalError("divergence is not finite")
    iters = len(duals.schedule) + 1
    record = {"value": value, "iters": iters, "seconds": seconds, "atoms": [a.n, b.n],
              "peak_mb": peak / 2**20}
    _emit(args, record, f"divergence {float(value)!r}\niterations {iters}\nseconds {seconds:.3f}\n"
                        f"atoms {a.n} {b.n}\npeak_memory_mb {peak / 2**20:.2f}")


def plan_triples(a, b, duals, params, threshold, chunk=1 << 20):
    """Yield ``(i, j, mass)`` for plan entries above ``threshold``, row block by row block."""
    rows = max(1, chunk // b.n)
    for s in range(0, a.n, rows):
        x = a.points[s:s + rows]
        C = params.cost(x[:, None, :], b.points[None, :, :]).reshape(x.shape[0], b.n)
        logp = (np.log(a.weights[s:s + rows])[:, None] + b.log_weights[None, :]
                + (duals.b_yx[s:s + rows, None] + duals.a_xy[None, :] - C) / duals.eps)
        ii, jj = np.nonzero(logp > math.log(threshold) if threshold > 0 else np.ones_like(logp, bool))
        for i, j in zip(ii, jj):
            yield s + int(i), int(j), float(math.exp(logp[i, j]))


def cmd_plan(args):
    a = load_measure(args.source, args.resample)
    b = load_measure(args.target, args.resample)
    _same_dim(a, b, args.source, args.target)
    params = _params(args)
    duals = _solve(a, b, params, args)
    thr = args.threshold * math.sqrt(a.mass * b.mass)
    triples = list(plan_triples(a, b, duals, params, thr))
    with _Output(args.out) as fh:
        if args.format == "json":
            fh.write(json.dumps({"entries": [list(t) for t in triples], "atoms": [a.n, b.n]}) + "\n")
        else:
            for i, j, m in triples:
                fh.write(f"{i} {j} {m!r}\n")


def cmd_transfer(args):
    for p in (args.subject, args.atlas, args.labels):
        io.check_readable(p)
    P = args.resample
    subj = flip_augment(encode_fibers(FiberSet(io.read_fibers(args.subject), P)), P)
    atlas_m = encode_fibers(FiberSet(io.read_fibers(args.atlas), P))
    labels = io.read_labels(args.labels, atlas_m.n)
    atlas = flip_augment(atlas_m, P)
    atlas_labels = LabelSet(labels.names, np.tile(labels.assignments, 2))
    params = _params(args, blur_default=2.0, reach_default=20.0)
    duals = _solve(subj.measure, atlas.measure, params, args)
    soft = transfer_labels(subj.measure, atlas.measure, atlas_labels, duals, params)
    soft = resolve_flips(soft, subj.flip_map)
    hard, conf = classify(soft, args.tau)
    counts = Counter("OUTLIER" if k == OUTLIER else labels.names[k] for k in hard)
    with _Output(args.out) as fh:
        if args.format == "json":
            fh.write(json.dumps({
                "labels": ["OUTLIER" if k == OUTLIER else labels.names[k] for k in hard],
                "confidence": conf.tolist(), "row_mass": soft.row_mass.tolist(),
                "counts": dict(counts)}) + "\n")
        else:
            for line in io.format_assignments(hard, conf, soft.row_mass, labels.names):
                fh.write(line + "\n")
    summary = sys.stdout if args.out else sys.stderr
    for name in list(labels.names) + ["OUTLIER"]:
        print(f"{name} {counts.get(name, 0)}", file=summary)


def cmd_barycenter(args):
    for p in args.inputs:
        io.check_readable(p)
    kinds = {_kind(p) for p in args.inputs}
    if kinds == {"density"}:
        maps = [io.read_density(p) for p in args.inputs]
        cfg = BarycenterConfig(_params(args, blur_default=maps[0].voxel_size), step=args.step,
                               iterations=args.iterations, upsample=args.upsample,
                               clusters=args.clusters or None)
        res = density_barycenter(maps, cfg, seed=args.seed)
    else:
        targets = [load_measure(p, args.resample) for p in args.inputs]
        for p, t in zip(args.inputs[1:], targets[1:]):
            _same_dim(targets[0], t, args.inputs[0], p)
        cfg = BarycenterConfig(_params(args), step=args.step, iterations=args.iterations,
                               upsample=args.upsample, clusters=args.clusters or None)
        # start from the first input, recentred on the mean of all input means
        means = [np.average(t.points, axis=0, weights=t.weights) for t in targets]
        init = targets[0].with_points(targets[0].points - means[0] + np.mean(means, axis=0))
        init = upsample(init, cfg.upsample, 0.5 * cfg.params.blur if cfg.upsample > 1 else 0.0, args.seed)
        res = barycenter(targets, init, cfg)
    m = res.measure
    if args.out:
        io.write_points(args.out, m)
    record = {"losses": res.losses, "steps": res.steps, "atoms": m.n}
    if args.format == "json":
        print(json.dumps(record))
    else:
        if not args.out:
            for w, x in zip(m.weights, m.points):
                print(" ".join(repr(float(v)) for v in (w, *x)))
        for k, loss in enumerate(res.losses):
            print(f"# iteration {k} loss {float(loss)!r}")


def _peak_during(fn):
    tracemalloc.start()
    t0 = time.perf_counter()
    out = fn()
    seconds = time.perf_counter() - t0
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    return out, seconds, peak


def cmd_bench(args):
    try:
        sizes = _sizes(args.sizes)
    except argparse.ArgumentTypeError as e:
        raise UsageError(str(e)) from None
    params = _params(args, blur_default=0.05)
    _warmup(args.dim, params, args)
    rows = []
    for n in sizes:
        rng = np.random.default_rng(args.seed + n)
        a = DiscreteMeasure(rng.random((n, args.dim)))
        b = DiscreteMeasure(rng.random((n, args.dim)))
        K = args.clusters or None
        (ms_val, ms_pairs), ms_sec, ms_peak = _peak_during(lambda: _bench_multiscale(a, b, params, K, args))
        row = {"n": n, "multiscale_seconds": ms_sec, "multiscale_pairs": ms_pairs,
               "multiscale_peak_mb": ms_peak / 2**20, "multiscale_value": ms_val}
        if not args.skip_dense:
            (d_val, d_pairs), d_sec, d_peak = _peak_during(lambda: _bench_dense(a, b, params))
            row.update({"dense_seconds": d_sec, "dense_pairs": d_pairs,
                        "dense_peak_mb": d_peak / 2**20, "dense_value": d_val})
        rows.append(row)
    # memory per atom must not grow with n
    per_atom = [r["multiscale_peak_mb"] / r["n"] for r in rows]
    linear = all(v <= 2.0 * per_atom[0] + 1e-3 for v in per_atom) if len(rows) > 1 else True
    record = {"rows": rows, "linear_memory": linear}
    lines = []
    for r in rows:
        s = (f"n={r['n']} multiscale {r['multiscale_seconds']:.2f}s pairs={r['multiscale_pairs']} "
             f"peak={r['multiscale_peak_mb']:.1f}MB")
        if "dense_seconds" in r:
            s += f" | dense {r['dense_seconds']:.2f}s pairs={r['dense_pairs']} peak={r['dense_peak_mb']:.1f}MB"
        lines.append(s)
    lines.append(f"linear_memory {linear}")
    _emit(args, record, "\n".join(lines))
    if not linear:
        raise NumericalError("peak memory per atom grows with n")


def _warmup(dim, params, args):
    # compile the kernels before timing anything
    rng = np.random.default_rng(0)
    a, b = DiscreteMeasure(rng.random((16, dim))), DiscreteMeasure(rng.random((16, dim)))
    _bench_multiscale(a, b, params, 4, args)
    _bench_dense(a, b, params)


def _bench_multiscale(a, b, params, K, args):
    duals = multiscale_sinkhorn(a, b, params, K_a=K, K_b=K, seed=args.seed, theta=args.theta)
    return divergence(a, b, params, duals), duals.pairs_evaluated


def _bench_dense(a, b, params):
    duals = symmetric_sinkhorn(a, b, params)
    return divergence(a, b, params, duals), duals.pairs_evaluated


def cmd_verify(args):
    a = load_measure(args.source, args.resample)
    b = load_measure(args.target, args.resample)
    _same_dim(a, b, args.source, args.target)
    params = _params(args)
    if not params.balanced:
        raise UsageError("verify compares against exact transport and needs --reach inf")
    exact = exact_ot(a, b, params.cost).value
    value = divergence(a, b, params, _solve(a, b, params, args))
    rel = abs(value - exact) / abs(exact) if exact else abs(value)
    record = {"value": value, "exact": exact, "relative_error": rel, "atoms": [a.n, b.n]}
    _emit(args, record, f"divergence {float(value)!r}\nexact {float(exact)!r}\nrelative_error {rel:.3e}")


def cmd_cluster(args):
    m = load_measure(args.source, args.resample)
    K = args.clusters or math.ceil(math.sqrt(m.n))
    tree = kmeans_coarsen(m, min(K, m.n), args.seed)
    record = {"k": tree.k, "sizes": tree.sizes.tolist(), "radii": tree.radii.tolist(),
              "labels": tree.labels.tolist()}
    if args.format == "json":
        _emit(args, record, "")
        return
    with _Output(args.out) as fh:
        fh.write(f"# {tree.k} clusters, max radius {float(tree.radii.max())!r}\n")
        fh.write("# weight, centroid coordinates, radius, size\n")
        for w, c, r, s in zip(tree.weights, tree.centroids, tree.radii, tree.sizes):
            fh.write(" ".join(repr(float(v)) for v in (w, *c)) + f" # radius {r!r} size {s}\n")


COMMANDS = {
    "divergence": cmd_divergence,
    "plan": cmd_plan,
    "transfer": cmd_transfer,
    "barycenter": cmd_barycenter,
    "bench": cmd_bench,
    "verify": cmd_verify,
    "cluster": cmd_cluster,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _kernels.set_threads(args.threads)
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
