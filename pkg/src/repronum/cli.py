"""Command-line interface.

Subcommands:

``estimate``
    Load counts (wide cumulative or long daily), standardize per territory,
    run the joint estimator, and write ``R_hat.csv``, ``O_hat.csv``,
    ``P_hat.csv`` (long format, original count units), ``manifest.json``,
    ``load_report.json``, and optionally ``trace.csv``.  Exit code 0 on
    convergence, 2 when the iteration cap is hit first (outputs are still
    written), 1 on input errors.

``mle``
    Closed-form ratio estimate; writes ``R_mle.csv`` with NaN sentinels
    where the estimate is undefined.

``baseline``
    Sliding-median outlier filter; writes ``Z_clean.csv`` and
    ``O_baseline.csv``, and with ``--chain`` continues into estimation on
    the cleaned counts with the outlier block pinned to zero (the two-step
    method).

``synth``
    Generate a synthetic dataset from a scenario file; writes ``Z.csv``,
    ``O_true.csv``, ``R_true.csv``.

Count-valued outputs (``Z.csv``, ``Z_clean.csv``) use the long-format
``count`` header so they feed straight back into ``estimate --format
long``; estimate-valued outputs use ``value``.

Every output directory gets exactly one ``manifest.json`` capturing the
command, inputs (with content digests), hyperparameters, solver
configuration, package version, wall time, and result summary; a rerun of
the same manifest on the same build reproduces the output files
bit-identically.
"""

import argparse
import hashlib
import json
import math
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .epidata import load_counts, load_graph, write_long
from .errors import RepronumError
from .model import CountMatrix, Hyperparameters, mle, sliding_median_baseline
from .serial_interval import discretize_gamma
from .solver import SolverConfig, smoothed_increment, solve_standardized
from .synth import generate, outlier_matrix, parse_scenario


def _version():
    """git-describe when run from a checkout, package version otherwise."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(value):
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return _jsonable(value.item())
    return value


def _write_manifest(out_dir, manifest):
    with open(Path(out_dir) / "manifest.json", "w") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_report(out_dir, report):
    with open(Path(out_dir) / "load_report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _matrix_like(values, template):
    return CountMatrix(values=values, territories=template.territories, dates=template.dates)


def _input_block(args, extra=None):
    block = {
        "input": {"path": str(args.input), "sha256": _sha256(args.input)},
        "format": args.format,
    }
    if getattr(args, "graph", None):
        block["graph"] = {"path": str(args.graph), "sha256": _sha256(args.graph)}
    else:
        block["graph"] = None
    if extra:
        block.update(extra)
    return block


def _add_io_flags(parser):
    parser.add_argument("--input", required=True, help="counts CSV")
    parser.add_argument(
        "--format",
        choices=("wide", "long"),
        default="long",
        help="input layout: wide cumulative or long daily (default long)",
    )
    parser.add_argument("--out-dir", required=True, help="output directory")


def _add_solver_flags(parser, penalties=True):
    cfg = SolverConfig()
    parser.add_argument("--lambda-t", type=float, default=3.5, help="temporal penalty weight")
    if penalties:
        parser.add_argument(
            "--lambda-s",
            type=float,
            default=None,
            help="spatial penalty weight (default 0.002 with --graph, 0 without)",
        )
        parser.add_argument(
            "--lambda-o",
            type=float,
            default=0.025,
            help="outlier penalty weight; 'inf' pins the outlier block to zero",
        )
    parser.add_argument("--epsilon", type=float, default=cfg.epsilon, help="stopping tolerance")
    parser.add_argument("--k-max", type=int, default=cfg.k_max, help="iteration cap")
    parser.add_argument(
        "--k-smooth", type=int, default=cfg.k_smooth, help="stopping smoothing window"
    )
    parser.add_argument("--trace", action="store_true", help="write trace.csv")


def _hyper_from_args(args):
    lam_s = args.lambda_s
    if lam_s is None:
        lam_s = 0.002 if getattr(args, "graph", None) else 0.0
    return Hyperparameters(lambda_t=args.lambda_t, lambda_s=lam_s, lambda_o=args.lambda_o)


def _config_from_args(args):
    return SolverConfig(epsilon=args.epsilon, k_max=args.k_max, k_smooth=args.k_smooth)


def _solve(matrix, phi, graph, hyper, config):
    """One estimate per territory when there is no coupling, joint otherwise.

    Without a graph the objective separates across territories, so each row
    is solved independently (in parallel) and the results are merged in
    territory order; the per-row standardization is identical either way.
    """
    D = matrix.num_territories
    if graph is not None or D == 1:
        est = solve_standardized(matrix, phi, graph, hyper, config)
        return [est], est.converged, est.iterations, est.objective
    rows = [
        CountMatrix(
            values=matrix.values[d : d + 1],
            territories=matrix.territories[d : d + 1],
            dates=matrix.dates,
        )
        for d in range(D)
    ]
    with ThreadPoolExecutor(max_workers=min(D, 8)) as pool:
        results = list(
            pool.map(lambda row: solve_standardized(row, phi, None, hyper, config), rows)
        )
    converged = all(r.converged for r in results)
    iterations = max(r.iterations for r in results)
    objective = float(sum(r.objective for r in results))
    return results, converged, iterations, objective


def _stack(results, field):
    return np.vstack([getattr(r, field) for r in results])


def _write_trace(out_dir, results, matrix, k_smooth):
    labels = matrix.territories if len(results) > 1 else ["all"]
    with open(Path(out_dir) / "trace.csv", "w") as fh:
        fh.write("territory,iteration,objective,increment,smoothed_increment\n")
        for est, label in zip(results, labels):
            trace = est.objective_trace
            for k in range(len(trace)):
                if k >= 1:
                    inc = repr(float(est.increment_trace[k - 1]))
                    smooth = repr(float(smoothed_increment(trace, k, k_smooth)))
                else:
                    inc = smooth = ""
                fh.write("%s,%d,%s,%s,%s\n" % (label, k, repr(float(trace[k])), inc, smooth))


def cmd_estimate(args):
    t0 = time.monotonic()
    matrix, report = load_counts(args.input, args.format)
    graph = load_graph(args.graph, num_vertices=matrix.num_territories) if args.graph else None
    hyper = _hyper_from_args(args)
    config = _config_from_args(args)
    phi = discretize_gamma()

    results, converged, iterations, objective = _solve(matrix, phi, graph, hyper, config)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_long(out_dir / "R_hat.csv", _matrix_like(_stack(results, "r_hat"), matrix), "value")
    write_long(out_dir / "O_hat.csv", _matrix_like(_stack(results, "o_hat"), matrix), "value")
    write_long(out_dir / "P_hat.csv", _matrix_like(_stack(results, "p_hat"), matrix), "value")
    if args.trace:
        _write_trace(out_dir, results, matrix, config.k_smooth)
    _write_report(out_dir, report)
    _write_manifest(
        out_dir,
        {
            "command": "estimate",
            "version": _version(),
            "inputs": _input_block(args),
            "hyper": {
                "lambda_t": hyper.lambda_t,
                "lambda_s": hyper.lambda_s,
                "lambda_o": hyper.lambda_o,
            },
            "solver": {
                "epsilon": config.epsilon,
                "k_max": config.k_max,
                "k_smooth": config.k_smooth,
                "step_safety": config.step_safety,
                "trace_every": config.trace_every,
            },
            "result": {
                "iterations": iterations,
                "converged": converged,
                "objective": objective,
            },
            "wall_time_seconds": time.monotonic() - t0,
        },
    )
    return 0 if converged else 2


def cmd_mle(args):
    t0 = time.monotonic()
    matrix, report = load_counts(args.input, args.format)
    phi = discretize_gamma()
    R = mle(matrix, phi)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_long(out_dir / "R_mle.csv", _matrix_like(R, matrix), "value")
    _write_report(out_dir, report)
    _write_manifest(
        out_dir,
        {
            "command": "mle",
            "version": _version(),
            "inputs": _input_block(args),
            "hyper": {},
            "solver": {},
            "result": {
                "iterations": 0,
                "converged": True,
                "objective": None,
                "undefined_entries": int(np.isnan(R).sum()),
            },
            "wall_time_seconds": time.monotonic() - t0,
        },
    )
    return 0


def cmd_baseline(args):
    t0 = time.monotonic()
    matrix, report = load_counts(args.input, args.format)
    clean, o_base = sliding_median_baseline(matrix, window=args.window, k=args.nsigma)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_long(out_dir / "Z_clean.csv", clean, "count")
    write_long(out_dir / "O_baseline.csv", _matrix_like(o_base, matrix), "value")
    _write_report(out_dir, report)

    exit_code = 0
    result = {
        "iterations": 0,
        "converged": True,
        "objective": None,
        "flagged_entries": int((o_base != 0).sum()),
    }
    hyper_block = {"window": args.window, "nsigma": args.nsigma}
    if args.chain:
        # two-step: estimate on the cleaned counts with outliers pinned off
        hyper = Hyperparameters(
            lambda_t=args.lambda_t, lambda_s=0.0, lambda_o=math.inf
        )
        config = _config_from_args(args)
        phi = discretize_gamma()
        results, converged, iterations, objective = _solve(clean, phi, None, hyper, config)
        write_long(out_dir / "R_hat.csv", _matrix_like(_stack(results, "r_hat"), clean), "value")
        write_long(out_dir / "O_hat.csv", _matrix_like(_stack(results, "o_hat"), clean), "value")
        write_long(out_dir / "P_hat.csv", _matrix_like(_stack(results, "p_hat"), clean), "value")
        if args.trace:
            _write_trace(out_dir, results, clean, config.k_smooth)
        result = {
            "iterations": iterations,
            "converged": converged,
            "objective": objective,
            "flagged_entries": int((o_base != 0).sum()),
        }
        hyper_block.update(
            {"lambda_t": hyper.lambda_t, "lambda_s": 0.0, "lambda_o": math.inf}
        )
        exit_code = 0 if converged else 2
    _write_manifest(
        out_dir,
        {
            "command": "baseline",
            "version": _version(),
            "inputs": _input_block(args, extra={"chain": bool(args.chain)}),
            "hyper": hyper_block,
            "solver": (
                {
                    "epsilon": args.epsilon,
                    "k_max": args.k_max,
                    "k_smooth": args.k_smooth,
                }
                if args.chain
                else {}
            ),
            "result": result,
            "wall_time_seconds": time.monotonic() - t0,
        },
    )
    return exit_code


def cmd_synth(args):
    t0 = time.monotonic()
    spec = parse_scenario(args.scenario)
    phi = discretize_gamma()
    matrix, o_true = generate(spec, phi)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_long(out_dir / "Z.csv", matrix, "count")
    write_long(out_dir / "O_true.csv", _matrix_like(o_true, matrix), "value")
    write_long(out_dir / "R_true.csv", _matrix_like(spec.r_true, matrix), "value")
    _write_manifest(
        out_dir,
        {
            "command": "synth",
            "version": _version(),
            "inputs": {
                "scenario": {"path": str(args.scenario), "sha256": _sha256(args.scenario)},
                "seed": spec.seed,
            },
            "hyper": {},
            "solver": {},
            "result": {
                "iterations": 0,
                "converged": True,
                "objective": None,
                "territories": spec.shape[0],
                "days": spec.shape[1],
            },
            "wall_time_seconds": time.monotonic() - t0,
        },
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="repronum",
        description="Joint reproduction-number and outlier estimation from daily counts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="joint R/O estimation")
    _add_io_flags(p_est)
    p_est.add_argument("--graph", default=None, help="territory graph file")
    _add_solver_flags(p_est)
    p_est.set_defaults(func=cmd_estimate)

    p_mle = sub.add_parser("mle", help="closed-form ratio estimate")
    _add_io_flags(p_mle)
    p_mle.set_defaults(func=cmd_mle)

    p_base = sub.add_parser("baseline", help="sliding-median outlier filter")
    _add_io_flags(p_base)
    p_base.add_argument("--window", type=int, default=7, help="median window length")
    p_base.add_argument(
        "--nsigma", type=float, default=2.5, help="flagging threshold in window stds"
    )
    p_base.add_argument(
        "--chain",
        action="store_true",
        help="continue into estimation on the cleaned counts (outliers pinned)",
    )
    _add_solver_flags(p_base, penalties=False)
    p_base.set_defaults(func=cmd_baseline)

    p_syn = sub.add_parser("synth", help="generate synthetic counts")
    p_syn.add_argument("--scenario", required=True, help="scenario key=value file")
    p_syn.add_argument("--out-dir", required=True, help="output directory")
    p_syn.set_defaults(func=cmd_synth)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (RepronumError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
