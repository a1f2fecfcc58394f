"""Command-line entry point: ``fkwm <subcommand> [options]``.

Exit codes: 0 success, 2 usage error, 3 time budget exhausted (a partial report
is still written).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, io
from .conditioned import chain_con_ni_envelopes, explore_con_ni
from .geometry import ConeParams, maximal_decomposition
from .gibbs import RcParams, dual_parameter, sample_chain
from .lattice import BoxGeometry, EdgeConfig, check_weyl
from .walks import (IncrementDist, cached_forward, default_height, estimate_V, km_bridge_count,
                    sample_conditioned_bridge)
from .watermelon import marginal_density, sample_watermelon

EXIT_OK, EXIT_USAGE, EXIT_BUDGET = 0, 2, 3


class UsageError(Exception):
    pass


def int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def geometry_arg(text: str) -> BoxGeometry:
    try:
        return BoxGeometry.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def dist_arg(text: str) -> IncrementDist:
    try:
        return IncrementDist.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d(0), help="master seed (default 0)")
    g.add_argument("--threads", type=int, default=d(None), help="worker threads (default: all cores)")
    g.add_argument("--out", type=Path, default=d(None),
                   help="output file; .jsonl, .csv or .json by suffix (default: stdout)")
    g.add_argument("--config", type=Path, default=d(None), help="key = value file; flags override it")
    g.add_argument("--budget-seconds", type=float, default=d(None),
                   help="stop after this many seconds and write a partial report (exit 3)")


# ---------------------------------------------------------------------------
# output helpers

def _records_out(args, records: list[dict], manifest: dict):
    if args.out is None:
        for r in records:
            print(io.dumps(r))
        return
    suffix = args.out.suffix
    if suffix == ".csv":
        io.write_csv(args.out, records, manifest=manifest)
    elif suffix == ".json":
        io.write_json(args.out, {"manifest": manifest, "records": records})
    else:
        io.write_jsonl(args.out, records, manifest)


def _summary_rows(report: harness.ExperimentReport) -> list[dict]:
    rows = []
    for row in report.rows:
        est = next((row[k] for k in ("estimate", "ks", "eta_late", "probability", "q_n", "tv_ok")
                    if k in row), None)
        se = next((row[k] for k in ("stderr", "eta_late_se") if k in row), None)
        rows.append({"n": row.get("n", row.get("geometry")), "estimate": est, "stderr": se,
                     "samples": row.get("samples", row.get("sweeps")), "seconds": report.seconds})
    return rows


def _long_rows(report: harness.ExperimentReport) -> list[dict]:
    out = []
    for row in report.rows:
        key = row.get("n", row.get("geometry"))
        for k, v in row.items():
            if isinstance(v, (int, float)) and v is not None:
                out.append({"experiment": report.experiment, "n": key, "quantity": k, "value": v})
    return out


def _report_out(args, report: harness.ExperimentReport):
    report.manifest = args.manifest
    data = report.to_dict()
    if args.out is None:
        print(json.dumps(io.to_jsonable(data), sort_keys=True, indent=2))
        return
    stem = args.out.with_suffix("")
    io.write_json(stem.with_suffix(".json"), data)
    io.write_csv(stem.with_suffix(".csv"), _summary_rows(report),
                 ["n", "estimate", "stderr", "samples", "seconds"], manifest=args.manifest)
    io.write_csv(Path(f"{stem}.long.csv"), _long_rows(report),
                 ["experiment", "n", "quantity", "value"], manifest=args.manifest)


def _print_kv(args, pairs: dict):
    if args.out is None:
        for k, v in pairs.items():
            print(f"{k} {v}")
    else:
        io.write_json(args.out, {"manifest": args.manifest, **io.to_jsonable(pairs)})


# ---------------------------------------------------------------------------
# subcommands

def cmd_sample_fk(args):
    params = RcParams(args.p, args.q, args.boundary)
    states = sample_chain(params, args.geometry, args.samples, args.seed, 0, args.burn_in, args.thin,
                          args.start)
    lines = [EdgeConfig(args.geometry, s, args.boundary).to_line() for s in states]
    _records_out(args, [{"config": line} for line in lines], args.manifest)


def _conditioned(args, keep_clusters=False):
    x, y = check_weyl(args.x, "x"), check_weyl(args.y, "y")
    g = harness.strip_box(args.n, x, y, sigma=1.5, height=args.height)
    if args.method == "rejection":
        return explore_con_ni(g, args.p, x, y, args.attempts or 10 ** 12, args.seed,
                              keep_clusters=keep_clusters, max_accept=args.samples)
    thin = args.thin or max(args.n * args.n // 4, 16)
    return chain_con_ni_envelopes(g, args.p, x, y, args.samples, args.seed, args.burn_in or 20 * thin,
                                  thin, keep_clusters=keep_clusters)


def cmd_sample_conditioned(args):
    s = _conditioned(args)
    records = [{"upper": s.upper[i].tolist(), "lower": s.lower[i].tolist()} for i in range(s.accepted)]
    if s.attempts:
        ph, se = s.probability()
        records.insert(0, {"attempts": s.attempts, "accepted": s.accepted, "estimate": ph, "stderr": se})
    _records_out(args, records, args.manifest)


def cmd_skeleton(args):
    s = _conditioned(args, keep_clusters=True)
    cone = ConeParams(args.delta)
    records = []
    for cl in s.clusters:
        for i, c in enumerate(cl):
            sk = maximal_decomposition(c, cone)
            records.append({"cluster": i, **json.loads(sk.to_json())})
    _records_out(args, records, args.manifest)


def cmd_walk_bridge(args):
    if len(args.x) != args.r or len(args.y) != args.r:
        raise UsageError("--x and --y need exactly r entries")
    b = sample_conditioned_bridge(args.dist, args.r, args.x, args.y, args.n, args.samples, args.seed,
                                  method=args.method)
    _records_out(args, [b.system(i).to_json() for i in range(args.samples)], args.manifest)


def cmd_km_prob(args):
    if len(args.x) != args.r or len(args.y) != args.r:
        raise UsageError("--x and --y need exactly r entries")
    count, prob = km_bridge_count(args.r, args.x, args.y, args.n)
    _print_kv(args, {"count": count, "probability": f"{prob} ({float(prob):.6g})"})


def cmd_dp_kernel(args):
    if len(args.x) != args.r or len(args.y) != args.r:
        raise UsageError("--x and --y need exactly r entries")
    x, y = check_weyl(args.x, "x"), check_weyl(args.y, "y")
    H = args.H or default_height(args.n, x, y)
    if args.exact:
        from .walks import dp_weyl_kernel
        value = dp_weyl_kernel(args.dist, args.r, x, y, args.n, H, exact=True)
    else:
        value = cached_forward(args.dist, args.r, x, args.n, H, args.cache_dir).at(args.n, y)
    _print_kv(args, {"value": value})


def cmd_estimate_v(args):
    if args.at is not None:
        V = estimate_V(args.dist, args.r, args.G, method=args.method)
        _print_kv(args, {"value": V(np.asarray(args.at)), "converged": V.converged, "residual": V.residual})
        return
    _report_out(args, harness.harmonic_experiment(args.dist, args.r, args.G, method=args.method))


def cmd_watermelon(args):
    if args.density is not None:
        if len(args.density) != args.r:
            raise UsageError("--density needs exactly r coordinates")
        _print_kv(args, {"density": marginal_density(args.r, args.t, args.density)})
        return
    w = sample_watermelon(args.r, args.m, args.samples, args.seed, args.method, args.eps)
    recs = [{"columns": w.grid.tolist(), "heights": w.heights[i].T.tolist()} for i in range(args.samples)]
    _records_out(args, recs, args.manifest)


def cmd_estimate_tau(args):
    rep = harness.ExperimentReport("estimate-tau", {"p": args.p, "q": args.q, "boundary": args.boundary,
                                                    "n": args.n_list, "samples": args.samples})
    tau = harness.estimate_tau(RcParams(args.p, args.q, args.boundary), args.n_list, args.samples,
                               args.seed, oz_correction=not args.no_oz)
    for n, ph, se, N in zip(tau.n, tau.phi, tau.phi_se, tau.samples):
        rep.rows.append({"n": n, "estimate": ph, "stderr": se, "samples": N})
    rep.fits["tau"] = {"tau": tau.tau, "se": tau.se, "ci95": [tau.tau - 1.96 * tau.se, tau.tau + 1.96 * tau.se]}
    rep.flags["subadditive_bound"] = tau.bound_ok
    _report_out(args, rep)


def cmd_scaling(args):
    if args.surrogate:
        rep = harness.walk_surrogate_scaling(len(args.x), args.x, args.y, args.n_list, args.dist)
    else:
        rep = harness.con_ni_scaling_experiment(args.p, args.x, args.y, args.n_list, args.samples,
                                                args.tau_n_list, args.tau_samples, args.seed,
                                                budget=args.budget)
    _report_out(args, rep)


def cmd_convergence(args):
    rep = harness.envelope_convergence_test(args.p, args.x, args.y, args.n_list, args.samples, args.seed,
                                            args.reference, args.method, budget=args.budget)
    _report_out(args, rep)


def cmd_repulsion(args):
    if args.mode == "walks":
        rep = harness.walk_repulsion_experiment(args.dist, args.x, args.y, args.n_list, args.samples,
                                                args.seed, args.eps, budget=args.budget)
    else:
        rep = harness.globrep_diagnostic(args.p, args.x, args.y, args.n_list, args.samples, args.seed,
                                         args.eps, budget=args.budget)
    _report_out(args, rep)


def cmd_duality(args):
    rep = harness.duality_stretch_check(args.p, args.n_list, args.samples, args.seed,
                                        tau_samples=args.tau_samples, budget=args.budget)
    _report_out(args, rep)


def cmd_dual(args):
    value = dual_parameter(args.p, args.q)
    if args.out is None:
        print(f"{value:.6f}")
    else:
        io.write_json(args.out, {"manifest": args.manifest, "p_dual": value})


def cmd_report(args):
    rows = []
    for path in args.reports:
        data = json.loads(Path(path).read_text())
        rows.append({"experiment": data["experiment"], "passed": data["passed"], "partial": data["partial"],
                     "seconds": data["seconds"], "file": str(path)})
    if args.out is None:
        for r in rows:
            status = "PARTIAL" if r["partial"] else ("PASS" if r["passed"] else "FAIL")
            print(f"{status:8s} {r['experiment']:24s} {r['seconds']:9.1f}s  {r['file']}")
    else:
        io.write_csv(args.out, rows, manifest=args.manifest)


# ---------------------------------------------------------------------------
# parser

def _conditioned_flags(sp):
    sp.add_argument("--n", type=int, required=True, help="number of columns")
    sp.add_argument("--x", type=int_list, required=True, help="source heights, increasing")
    sp.add_argument("--y", type=int_list, required=True, help="target heights, increasing")
    sp.add_argument("--p", type=float, required=True, help="edge probability (q = 1)")
    sp.add_argument("--samples", type=int, default=100)
    sp.add_argument("--method", choices=("chain", "rejection"), default="chain")
    sp.add_argument("--attempts", type=int, default=None, help="rejection: cap on attempts")
    sp.add_argument("--thin", type=int, default=None, help="chain: sweeps between samples")
    sp.add_argument("--burn-in", type=int, default=None, help="chain: sweeps before the first sample")
    sp.add_argument("--height", type=int, default=None, help="rows of padding around the endpoints")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fkwm", description=__doc__.split("\n")[0],
                                     epilog="exit codes: 0 success, 2 usage error, 3 budget exhausted")
    _global_flags(parser, suppress=False)
    subs = parser.add_subparsers(dest="command", metavar="subcommand")
    subs.required = True

    def add(name, func, help_text):
        sp = subs.add_parser(name, help=help_text, description=help_text)
        _global_flags(sp, suppress=True)
        sp.set_defaults(func=func)
        return sp

    sp = add("sample-fk", cmd_sample_fk, "heat-bath random-cluster samples in the line format")
    sp.add_argument("--geometry", type=geometry_arg, required=True, help="n,h_lo,h_hi")
    sp.add_argument("--p", type=float, required=True)
    sp.add_argument("--q", type=float, default=1.0)
    sp.add_argument("--boundary", choices=("free", "wired"), default="free")
    sp.add_argument("--samples", type=int, default=10)
    sp.add_argument("--burn-in", type=int, default=200)
    sp.add_argument("--thin", type=int, default=10)
    sp.add_argument("--start", choices=("closed", "open"), default="closed")

    sp = add("sample-conditioned", cmd_sample_conditioned, "envelopes of samples conditioned on Con and NI")
    _conditioned_flags(sp)

    sp = add("skeleton", cmd_skeleton, "maximal cone-point skeletons of conditioned clusters")
    _conditioned_flags(sp)
    sp.add_argument("--delta", type=float, default=1.0, help="cone slope parameter")

    sp = add("walk-bridge", cmd_walk_bridge, "walk systems conditioned to stay ordered and end at y")
    sp.add_argument("--dist", type=dist_arg, default=IncrementDist.simple(), help="simple, lazy:A or table:...")
    sp.add_argument("--r", type=int, required=True)
    sp.add_argument("--x", type=int_list, required=True)
    sp.add_argument("--y", type=int_list, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--samples", type=int, default=10)
    sp.add_argument("--method", choices=("dp-backward", "rejection"), default="dp-backward")

    sp = add("km-prob", cmd_km_prob, "non-intersection count and probability of simple-walk bridges")
    sp.add_argument("--r", type=int, required=True)
    sp.add_argument("--x", type=int_list, required=True)
    sp.add_argument("--y", type=int_list, required=True)
    sp.add_argument("--n", type=int, required=True)

    sp = add("dp-kernel", cmd_dp_kernel, "Weyl-chamber transition probability by dynamic programming")
    sp.add_argument("--dist", type=dist_arg, default=IncrementDist.simple())
    sp.add_argument("--r", type=int, required=True)
    sp.add_argument("--x", type=int_list, required=True)
    sp.add_argument("--y", type=int_list, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--H", type=int, default=None, help="grid half-height")
    sp.add_argument("--exact", action="store_true", help="rational arithmetic (exact distributions only)")
    sp.add_argument("--cache-dir", type=Path, default=None, help="cache float tables here")

    sp = add("estimate-v", cmd_estimate_v, "harmonic function of the killed walk on gap space")
    sp.add_argument("--dist", type=dist_arg, default=IncrementDist.simple())
    sp.add_argument("--r", type=int, default=2)
    sp.add_argument("--G", type=int, default=60, help="largest gap on the grid")
    sp.add_argument("--method", choices=("iterate", "solve"), default="solve")
    sp.add_argument("--at", type=int_list, default=None, help="evaluate at this ordered vector")

    sp = add("watermelon", cmd_watermelon, "Brownian watermelon samples or marginal density")
    sp.add_argument("--r", type=int, required=True)
    sp.add_argument("--m", type=int, default=64, help="time grid resolution")
    sp.add_argument("--samples", type=int, default=10)
    sp.add_argument("--method", choices=("matrix-bridge", "epsilon-rejection"), default="matrix-bridge")
    sp.add_argument("--eps", type=float, default=0.05)
    sp.add_argument("--density", type=float_list, default=None, help="evaluate the marginal density here")
    sp.add_argument("--t", type=float, default=0.5)

    sp = add("estimate-tau", cmd_estimate_tau, "inverse correlation length along the first axis")
    sp.add_argument("--p", type=float, required=True)
    sp.add_argument("--q", type=float, default=1.0)
    sp.add_argument("--boundary", choices=("free", "wired"), default="free")
    sp.add_argument("--n-list", type=int_list, default=[4, 6, 8, 10, 12])
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--no-oz", action="store_true", help="fit without the log(n)/2 prefactor term")

    sp = add("scaling", cmd_scaling, "prefactor exponent and decay rate of Con and NI")
    sp.add_argument("--p", type=float, default=0.48)
    sp.add_argument("--x", type=int_list, default=[0, 6])
    sp.add_argument("--y", type=int_list, default=[0, 6])
    sp.add_argument("--n-list", type=int_list, default=[8, 12, 16, 24, 32])
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--tau-n-list", type=int_list, default=[8, 12, 16, 24, 32])
    sp.add_argument("--tau-samples", type=int, default=100_000)
    sp.add_argument("--surrogate", action="store_true", help="fit exact walk kernels instead")
    sp.add_argument("--dist", type=dist_arg, default=IncrementDist.simple())

    sp = add("convergence", cmd_convergence, "KS distance of scaled envelopes to the watermelon")
    sp.add_argument("--p", type=float, default=0.3)
    sp.add_argument("--x", type=int_list, default=[0, 4])
    sp.add_argument("--y", type=int_list, default=[0, 4])
    sp.add_argument("--n-list", type=int_list, default=[8, 16, 32])
    sp.add_argument("--samples", type=int, default=2000)
    sp.add_argument("--reference", type=int, default=200_000, help="watermelon reference sample size")
    sp.add_argument("--method", choices=("chain", "rejection"), default="chain")

    sp = add("repulsion", cmd_repulsion, "edge and bulk repulsion frequencies")
    sp.add_argument("--mode", choices=("walks", "percolation"), default="walks")
    sp.add_argument("--dist", type=dist_arg, default=IncrementDist.lazy(0.02))
    sp.add_argument("--p", type=float, default=0.3)
    sp.add_argument("--x", type=int_list, default=[0, 2])
    sp.add_argument("--y", type=int_list, default=[0, 2])
    sp.add_argument("--n-list", type=int_list, default=[64, 256, 1024])
    sp.add_argument("--samples", type=int, default=4000)
    sp.add_argument("--eps", type=float, default=0.2)

    sp = add("duality", cmd_duality, "supercritical box-finite two-point decay against the dual rate")
    sp.add_argument("--p", type=float, default=0.6)
    sp.add_argument("--n-list", type=int_list, default=[2, 4, 6, 8])
    sp.add_argument("--samples", type=int, default=1_000_000)
    sp.add_argument("--tau-samples", type=int, default=1_000_000)

    sp = add("dual", cmd_dual, "dual edge parameter")
    sp.add_argument("--p", type=float, required=True)
    sp.add_argument("--q", type=float, required=True)

    sp = add("report", cmd_report, "summarize experiment report JSON files")
    sp.add_argument("reports", nargs="+", type=Path)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]):
    """Install ``--config`` values as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    subs = parser._subparsers._group_actions[0].choices
    command = next((t for t in argv if t in subs), None)
    if command is None:
        return
    sub = subs[command]
    cfg = io.read_config(known.config)
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(cfg) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    for k, v in cfg.items():
        conv = actions[k].type
        if conv is not None:
            text = ",".join(str(t) for t in v) if isinstance(v, list) else str(v)
            try:
                cfg[k] = conv(text)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {k}: {exc}")
        # options supplied by the config file are no longer required on the command line
        actions[k].required = False
    sub.set_defaults(**cfg)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (UsageError, ValueError, OSError) as exc:
        print(f"fkwm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.threads is not None:
        if args.threads < 1:
            print("fkwm: error: --threads must be at least 1", file=sys.stderr)
            return EXIT_USAGE
        import numba
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    params = {k: v for k, v in vars(args).items()
              if k not in ("func", "seed", "out", "config", "threads", "budget_seconds", "command")}
    params = {k: (v.key() if isinstance(v, IncrementDist) else str(v) if isinstance(v, (BoxGeometry, Path)) else v)
              for k, v in params.items()}
    args.manifest = io.make_manifest(args.command, params, args.seed, out=args.out, config=args.config)
    args.budget = harness.Budget(args.budget_seconds)
    try:
        args.func(args)
    except harness.BudgetExhausted as exc:
        _report_out(args, exc.report)
        print(f"fkwm: {exc}; partial report written", file=sys.stderr)
        return EXIT_BUDGET
    except (UsageError, ValueError) as exc:
        print(f"fkwm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
