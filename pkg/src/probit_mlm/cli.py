"""Command-line interface.

Subcommands: points, cdf, gwi, simulate, benchmark, fit, compare. Every
flag can also be given in a plain-text config file (key = value per line,
# comments); explicit flags override the file. Outputs are TSV with a fixed
column order. Exit codes: 0 success, 1 input error, 2 precision not reached.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .errors import ParseError, PrecisionNotReached, ProbitMlmError, SchemaMismatch

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_PRECISION = 2


def _read_config(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = val
    return out


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser):
    if not getattr(args, "config", None):
        return args
    conf = _read_config(args.config)
    defaults = {a.dest: a.default for a in parser._actions}
    for key, val in conf.items():
        if not hasattr(args, key):
            continue
        if getattr(args, key) == defaults.get(key):  # flags override file
            cur = defaults.get(key)
            if isinstance(cur, bool):
                setattr(args, key, val.lower() in ("1", "true", "yes"))
            elif isinstance(cur, int):
                setattr(args, key, int(val))
            elif isinstance(cur, float):
                setattr(args, key, float(val))
            else:
                setattr(args, key, val)
    return args


def _out_stream(args):
    return open(args.out, "w") if getattr(args, "out", None) else sys.stdout


def _emit(fh, rows):
    for row in rows:
        fh.write("\t".join(str(c) for c in row) + "\n")


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_points(args) -> int:
    from .sequences import korobov_points, sobol_points

    if args.kind == "sobol":
        pts = sobol_points(args.K, args.n, None if args.seed < 0 else args.seed)
    elif args.kind == "korobov":
        pts = korobov_points(args.n, args.K, args.seed).points()
    else:
        print(f"unknown point kind '{args.kind}'", file=sys.stderr)
        return EXIT_INPUT
    with _out_stream(args) as fh:
        _emit(fh, [[f"{v:.17g}" for v in row] for row in pts])
    return EXIT_OK


def _read_cdf_problem(path: str):
    """Problem file: line 1 dim, line 2 lower, line 3 upper, line 4 mean,
    then dim rows of the covariance."""
    with open(path) as fh:
        tokens = [line.split() for line in fh if line.strip()]
    try:
        dim = int(tokens[0][0])
        lower = np.array([float(v) for v in tokens[1]])
        upper = np.array([float(v) for v in tokens[2]])
        mean = np.array([float(v) for v in tokens[3]])
        cov = np.array([[float(v) for v in tokens[4 + i]] for i in range(dim)])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{path}: malformed CDF problem file ({exc})") from None
    return lower, upper, mean, cov


def _cmd_cdf(args) -> int:
    from .mvn import CdfOptions, HyperRect, mvn_cdf

    lower, upper, mean, cov = _read_cdf_problem(args.problem)
    opts = CdfOptions(abs_tol=args.abs_tol, rel_tol=args.rel_tol,
                      max_samples=args.max_samples, seed=args.seed)
    res = mvn_cdf(HyperRect(lower, upper), mean, cov, opts)
    with _out_stream(args) as fh:
        _emit(fh, [["estimate", "std_error", "n_evals", "status"],
                   [f"{res.estimate:.12g}", f"{res.std_error:.6g}",
                    res.n_evals, res.status]])
    return EXIT_OK if res.status in ("Converged", "Exact") else EXIT_PRECISION


def _cmd_gwi(args) -> int:
    import json

    from .gwi import GwiProblem, McOptions, aghq, ghq, laplace
    from .models import build_binomial, BinomialCluster
    from .harness import cluster_loglik

    with open(args.problem) as fh:
        spec = json.load(fh)
    cl = BinomialCluster(y=np.array(spec["y"]), m=np.array(spec["m"]),
                         x_design=np.array(spec["x"]), z_design=np.array(spec["z"]))
    built = build_binomial(cl, np.array(spec["beta"]), np.array(spec["sigma"]))
    import time as _time

    t0 = _time.perf_counter()
    ll, rel_se = cluster_loglik(built, args.engine, rel_tol=args.rel_tol,
                                max_samples=args.max_samples, nodes=args.nodes,
                                seed=args.seed)
    elapsed = _time.perf_counter() - t0
    with _out_stream(args) as fh:
        _emit(fh, [["engine", "log_estimate", "rel_se", "time_s"],
                   [args.engine, f"{ll:.10g}", f"{rel_se:.4g}", f"{elapsed:.6f}"]])
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from .harness import SimSpec, simulate_binomial, simulate_multinomial

    spec = SimSpec(family=args.family, n=args.n, K=args.K, c=args.c, seed=args.seed)
    rows = [["rep", "i", "y", "eta", "z"]]
    for rep in range(args.reps):
        if args.family == "binomial":
            cluster, _ = simulate_binomial(spec, rep)
            for i in range(cluster.n):
                rows.append([rep, i, cluster.y[i],
                             f"{cluster.x_design[i, 0]:.10g}",
                             ",".join(f"{v:.10g}" for v in cluster.z_design[i])])
        elif args.family == "multinomial":
            cluster, _ = simulate_multinomial(spec, rep)
            for i in range(cluster.n):
                rows.append([rep, i, cluster.y[i],
                             ",".join(f"{v:.10g}" for v in cluster.x_design[i]), "I"])
        else:
            print("simulate supports binomial and multinomial", file=sys.stderr)
            return EXIT_INPUT
    with _out_stream(args) as fh:
        _emit(fh, rows)
    return EXIT_OK


def _cmd_benchmark(args) -> int:
    from .harness import GroundTruthOptions, SimSpec, benchmark

    methods = args.methods.split(",")
    spec = SimSpec(family=args.family, n=args.n, K=args.K, c=args.c, seed=args.seed)
    gt = GroundTruthOptions(base_samples=args.gt_base, max_samples=args.gt_cap,
                            seed=args.seed)
    rows = benchmark(spec, methods, target_rmse=args.target_rmse,
                     n_instances=args.instances, gt_opts=gt, seed=args.seed)
    out = [["family", "n", "K", "method", "median_ms", "mean_ms", "rmse",
            "failures", "tuning"]]
    for r in rows:
        out.append([r.family, r.n, r.K, r.method, f"{r.median_ms:.4f}",
                    f"{r.mean_ms:.4f}", f"{r.rmse:.3e}", r.failures, r.calibrated])
    with _out_stream(args) as fh:
        _emit(fh, out)
    return EXIT_OK


def _cmd_fit(args) -> int:
    from .harness import FitOptions, GroupedIsotropicCov, UnstructuredCov, fit_ml, load_csv

    loaded = load_csv(args.data, args.family)
    if isinstance(loaded, tuple):
        clusters, cov = loaded
    else:
        clusters, cov = loaded, None
    opts = FitOptions(engine=args.engine, nodes=args.nodes, seed=args.seed,
                      threads=args.threads,
                      stages=[(args.rel_tol * 10, args.max_samples // 5),
                              (args.rel_tol, args.max_samples)])
    res = fit_ml(clusters, args.family, args.engine, cov=cov, opts=opts)
    rows = [["quantity", "value"]]
    for i, v in enumerate(res.coefficients):
        rows.append([f"coef{i}", f"{v:.6f}"])
    if "sds" in res.extra:
        for i, v in enumerate(res.extra["sds"]):
            rows.append([f"sd{i}", f"{v:.6f}"])
    else:
        sd = np.sqrt(np.diag(res.sigma))
        for i, v in enumerate(sd):
            rows.append([f"sd{i}", f"{v:.6f}"])
    rows.append(["log_likelihood", f"{res.log_likelihood:.6f}"])
    rows.append(["iterations", res.iterations])
    rows.append(["status", res.status])
    with _out_stream(args) as fh:
        _emit(fh, rows)
    return EXIT_OK if res.status == "Converged" else EXIT_PRECISION


def _cmd_compare(args) -> int:
    """Representation-equivalence check: CDF path vs GWI engines per instance."""
    from .harness import SimSpec, simulate_binomial, simulate_multinomial, cluster_loglik
    from .models import build_binomial, build_multinomial

    spec = SimSpec(family=args.family, n=args.n, K=args.K, c=args.c, seed=args.seed)
    engines = args.methods.split(",")
    out = [["rep", "engine", "log_estimate", "rel_se"]]
    for rep in range(args.reps):
        if args.family == "binomial":
            cluster, truth = simulate_binomial(spec, rep)
            built = build_binomial(cluster, truth["beta"], truth["sigma"])
        else:
            cluster, truth = simulate_multinomial(spec, rep)
            built = build_multinomial(cluster, truth["bmat"], truth["sigma"])
        for eng in engines:
            ll, rel_se = cluster_loglik(built, eng, rel_tol=args.rel_tol,
                                        max_samples=args.max_samples,
                                        nodes=args.nodes, seed=args.seed + rep)
            out.append([rep, eng, f"{ll:.8f}", f"{rel_se:.3e}"])
    with _out_stream(args) as fh:
        _emit(fh, out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_common(sp):
    sp.add_argument("--family", default="binomial")
    sp.add_argument("--engine", default="cdf")
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--K", type=int, default=2)
    sp.add_argument("--c", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rel-tol", dest="rel_tol", type=float, default=1e-3)
    sp.add_argument("--abs-tol", dest="abs_tol", type=float, default=0.0)
    sp.add_argument("--max-samples", dest="max_samples", type=int, default=500_000)
    sp.add_argument("--nodes", type=int, default=7)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probit-mlm")
    sub = parser.add_subparsers(dest="command", required=True)

    p_points = sub.add_parser("points", help="dump a point set as TSV")
    p_points.add_argument("kind", choices=["sobol", "korobov"])
    _add_common(p_points)

    p_cdf = sub.add_parser("cdf", help="estimate an MVN rectangle probability")
    p_cdf.add_argument("problem", help="text problem file (dim/bounds/mean/cov)")
    _add_common(p_cdf)

    p_gwi = sub.add_parser("gwi", help="approximate one cluster likelihood")
    p_gwi.add_argument("problem", help="JSON problem file")
    _add_common(p_gwi)

    p_sim = sub.add_parser("simulate", help="draw protocol instances")
    p_sim.add_argument("--reps", type=int, default=1)
    _add_common(p_sim)

    p_bench = sub.add_parser("benchmark", help="timing/precision tables")
    p_bench.add_argument("--methods", default="cdf,aghq,ghq,spherical_radial,rqmc")
    p_bench.add_argument("--target-rmse", dest="target_rmse", type=float, default=2e-3)
    p_bench.add_argument("--instances", type=int, default=3)
    p_bench.add_argument("--gt-base", dest="gt_base", type=int, default=100_000)
    p_bench.add_argument("--gt-cap", dest="gt_cap", type=int, default=1_000_000)
    _add_common(p_bench)

    p_fit = sub.add_parser("fit", help="maximum-likelihood fit from a CSV")
    p_fit.add_argument("data", help="cluster CSV file")
    _add_common(p_fit)

    p_cmp = sub.add_parser("compare", help="CDF path vs GWI engines")
    p_cmp.add_argument("--methods", default="cdf,aghq,importance")
    p_cmp.add_argument("--reps", type=int, default=3)
    _add_common(p_cmp)

    return parser


_DISPATCH = {
    "points": _cmd_points,
    "cdf": _cmd_cdf,
    "gwi": _cmd_gwi,
    "simulate": _cmd_simulate,
    "benchmark": _cmd_benchmark,
    "fit": _cmd_fit,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args, parser)
        return _DISPATCH[args.command](args)
    except (ParseError, SchemaMismatch, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PrecisionNotReached as exc:
        print(f"precision not reached: {exc}", file=sys.stderr)
        return EXIT_PRECISION
    except ProbitMlmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
