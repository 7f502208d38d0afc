"""Command-line workflows: simulate, disaggregate, sweep.

Every command writes CSV outputs at 15 significant digits plus a manifest
recording the resolved configuration, input digests, seed, version, and wall
time, so a run can be reproduced exactly. Exit codes are 0 (success),
2 (usage), 3 (input), 4 (numerical), 5 (convergence).
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataprep import impute_panel, load_panel_csv, pca_fit, pca_transform
from .diagnostics import theoretical_summary
from .estimator import EstimationConfig, fit
from .exceptions import (
    ConvergenceError,
    CovarianceError,
    InfeasibleAnchorError,
    InsufficientDataError,
    IsolatedRegionError,
    NearSingularError,
    NoOverlapError,
    RankDeficientError,
    RedundantAnchorError,
    TooLargeError,
    UndefinedMetricError,
    ZeroVarianceError,
)
from .predictor import anchored_blup, blup, save_disaggregation_csv
from .simulation import ScenarioSpec, generate, load_sweep_config, sweep
from .validation import column_scale_ratio
from .weights import (
    gower_weights,
    load_mixed_records_csv,
    load_weights_edges,
    load_weights_matrix,
    save_weights_csv,
    validate_identifiability,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4
EXIT_CONVERGENCE = 5

JOBS_ENV_VAR = "SPATDISAGG_JOBS"

INPUT_ERRORS = (
    FileNotFoundError,
    IsolatedRegionError,
    NoOverlapError,
    InsufficientDataError,
    ZeroVarianceError,
    UndefinedMetricError,
    RedundantAnchorError,
    InfeasibleAnchorError,
)
NUMERICAL_ERRORS = (
    NearSingularError,
    CovarianceError,
    TooLargeError,
    RankDeficientError,
    np.linalg.LinAlgError,
)


@dataclass
class RunManifest:
    """Reproducibility record emitted alongside every command's outputs."""

    command: str
    config_hash: str
    input_digests: dict
    seed: int | None
    tool_version: str
    wall_time_s: float
    warnings: list = field(default_factory=list)

    def write(self, outdir: Path):
        path = Path(outdir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(args: argparse.Namespace) -> str:
    payload = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def _spatial_param(text: str) -> float:
    value = float(text)
    if not abs(value) < 1:
        raise argparse.ArgumentTypeError(f"|value| must be < 1 (stationarity); got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"value must be positive; got {value}")
    return value


def _float_pair(text: str):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers; got {text!r}")
    return float(parts[0]), float(parts[1])


def _write_long_csv(path, regions, periods, values_matrix, header):
    """values_matrix is (T, n); rows written region-fastest with 1-based labels."""
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t, period in enumerate(periods):
            for i, region in enumerate(regions):
                fh.write(f"{region},{period},{values_matrix[t, i]:.15g}\n")


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    spec = ScenarioSpec(
        k=args.k, T=args.T, rho=args.rho, phi=args.phi,
        beta0=args.beta[0], beta1=args.beta[1], sigma=args.sigma, seed=args.seed,
    )
    data = generate(spec)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    regions = list(range(1, spec.n + 1))
    periods = list(range(1, spec.T + 1))

    z2 = data.Z[:, 1].reshape(spec.T, spec.n)
    with open(outdir / "covariates.csv", "w") as fh:
        fh.write("region,period,variable,value\n")
        for t, period in enumerate(periods):
            for i, region in enumerate(regions):
                fh.write(f"{region},{period},z2,{z2[t, i]:.15g}\n")
    with open(outdir / "aggregate.csv", "w") as fh:
        fh.write("period,total\n")
        for t, period in enumerate(periods):
            fh.write(f"{period},{data.ya[t]:.15g}\n")
    _write_long_csv(outdir / "y_true.csv", regions, periods, data.y_true.as_matrix(), "region,period,value")
    save_weights_csv(data.weights, outdir / "W.csv")

    RunManifest(
        command="simulate",
        config_hash=_config_hash(args),
        input_digests={},
        seed=spec.seed,
        tool_version=__version__,
        wall_time_s=time.perf_counter() - start,
        warnings=["intercept column omitted from covariates.csv; disaggregate adds one by default"],
    ).write(outdir)
    logger.info("wrote synthetic scenario (n=%d, T=%d) to %s", spec.n, spec.T, outdir)
    return EXIT_OK


def _load_weights(args, n_expected):
    if args.weights_matrix:
        w = load_weights_matrix(args.weights_matrix)
    elif args.weights_edges:
        w = load_weights_edges(args.weights_edges, n=n_expected)
    else:
        records, _ = load_mixed_records_csv(args.gower)
        w = gower_weights(records)
    if w.n != n_expected:
        raise ValueError(f"weight matrix has {w.n} regions but the panel has {n_expected}")
    return w


def cmd_disaggregate(args) -> int:
    start = time.perf_counter()
    dataset = load_panel_csv(args.covariates, args.aggregate, args.anchors)
    dataset = impute_panel(dataset)
    warnings_log = []
    if dataset.imputed is not None and dataset.imputed.any():
        warnings_log.append(f"imputed {int(dataset.imputed.sum())} covariate cells")

    pca_info = None
    X = dataset.covariates
    if args.pca:
        model = pca_fit(X, threshold_pct=args.pca_threshold)
        X = pca_transform(model, X)
        pca_info = {
            "explained_variance_pct": model.explained_variance_pct.tolist(),
            "n_components": model.n_components_selected,
            "threshold_pct": args.pca_threshold,
        }
        logger.info(
            "PCA selected %d of %d components at threshold %.1f%%",
            model.n_components_selected, model.k, args.pca_threshold,
        )
    if args.intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
    if column_scale_ratio(X) > 1e6:
        warnings_log.append("covariate columns are badly scaled")

    weights = _load_weights(args, dataset.n)
    ident = validate_identifiability(weights)
    if not ident.passed:
        warnings_log.append(ident.message)

    config = EstimationConfig(
        rho_bounds=args.rho_bounds, phi_bounds=args.phi_bounds,
        multistart=args.multistart, max_iter=args.max_iter,
        grad_tol=args.grad_tol, seed=args.seed,
    )
    fit_result = fit(X, dataset.aggregate, weights, config)
    warnings_log.extend(fit_result.condition_warnings)

    kwargs = {}
    if args.mean_uncertainty:
        kwargs = {"param_cov": fit_result.param_cov, "mean_uncertainty": True}
    if dataset.anchors:
        result = anchored_blup(fit_result.params, X, dataset.aggregate, dataset.anchors, weights, **kwargs)
    else:
        result = blup(fit_result.params, X, dataset.aggregate, weights, **kwargs)
    logger.info("coherence residual %.3e over %d periods", result.coherence_residual, dataset.T)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_disaggregation_csv(result, outdir / "disaggregation.csv")
    (outdir / "fit.json").write_text(json.dumps(fit_result.to_dict(), indent=2) + "\n")

    diagnostics = {
        "coherence_residual": result.coherence_residual,
        "anchored_cells": len(result.anchored_cells),
        "identifiability": {"passed": ident.passed, "column_sum_spread": ident.spread},
        "pca": pca_info,
    }
    try:
        summary = theoretical_summary(fit_result.params, weights, dataset.T)
        diagnostics["theoretical"] = {
            "r2_disagg": summary.r2_disagg,
            "r2_agg": summary.r2_agg,
            "rmse_disagg": summary.rmse_disagg,
            "rmse_agg": summary.rmse_agg,
        }
    except TooLargeError as exc:
        diagnostics["theoretical"] = None
        warnings_log.append(str(exc))
    (outdir / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2) + "\n")

    inputs = {str(p): _sha256(p) for p in (args.covariates, args.aggregate, args.anchors,
                                           args.weights_matrix, args.weights_edges, args.gower) if p}
    RunManifest(
        command="disaggregate",
        config_hash=_config_hash(args),
        input_digests=inputs,
        seed=args.seed,
        tool_version=__version__,
        wall_time_s=time.perf_counter() - start,
        warnings=warnings_log,
    ).write(outdir)
    return EXIT_OK


def cmd_sweep(args) -> int:
    start = time.perf_counter()
    try:
        parsed = load_sweep_config(args.config)
    except ValueError as exc:
        logger.error("bad sweep config: %s", exc)
        return EXIT_USAGE
    jobs = args.jobs if args.jobs is not None else int(os.environ.get(JOBS_ENV_VAR, "1"))
    summary = sweep(
        parsed["grid"],
        replications=parsed.get("replications", 5),
        jobs=max(1, jobs),
        base_seed=parsed.get("base_seed", 0),
        chi2_squared=not args.chi2_as_written,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    summary.runs_frame().to_csv(outdir / "runs.csv", index=False, float_format="%.15g")
    summary.by_category().to_csv(outdir / "summary_by_category.csv", index=False, float_format="%.15g")
    summary.by_cell().to_csv(outdir / "summary_by_cell.csv", index=False, float_format="%.15g")
    summary.by_rho_cell().to_csv(outdir / "summary_by_rho.csv", index=False, float_format="%.15g")

    warnings_log = []
    if summary.failure_count:
        warnings_log.append(f"{summary.failure_count} of {len(summary.runs)} runs failed")
    RunManifest(
        command="sweep",
        config_hash=_config_hash(args),
        input_digests={str(args.config): _sha256(args.config)},
        seed=parsed.get("base_seed", 0),
        tool_version=__version__,
        wall_time_s=time.perf_counter() - start,
        warnings=warnings_log,
    ).write(outdir)
    logger.info("sweep wrote %d runs (%d failures) to %s", len(summary.runs), summary.failure_count, outdir)
    if args.strict and summary.failure_count:
        return EXIT_CONVERGENCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatdisagg",
        description="Disaggregate aggregate time series into spatially coherent regional components.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate one synthetic scenario as CSV files")
    sim.add_argument("--k", type=int, required=True, help="grid side; n = k^2 regions")
    sim.add_argument("--T", type=int, required=True, help="number of periods")
    sim.add_argument("--rho", type=_spatial_param, required=True, help="spatial parameter, |rho| < 1")
    sim.add_argument("--phi", type=_spatial_param, required=True, help="AR(1) parameter, |phi| < 1")
    sim.add_argument("--beta", type=_float_pair, default=(1.0, 1.0), help="beta0,beta1")
    sim.add_argument("--sigma", type=_positive_float, default=0.1, help="innovation standard deviation")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=cmd_simulate)

    dis = sub.add_parser("disaggregate", help="run the full pipeline on CSV inputs")
    dis.add_argument("--covariates", required=True, help="long CSV: region,period,variable,value")
    dis.add_argument("--aggregate", required=True, help="CSV: period,total")
    dis.add_argument("--anchors", default=None, help="optional CSV: region,period,value")
    wsrc = dis.add_mutually_exclusive_group(required=True)
    wsrc.add_argument("--weights-matrix", default=None, help="dense CSV weight matrix")
    wsrc.add_argument("--weights-edges", default=None, help="CSV edge list, 1-based i,j")
    wsrc.add_argument("--gower", default=None, help="mixed-type indicators CSV (num:/cat: headers)")
    dis.add_argument("--pca", action="store_true", help="reduce covariates by correlation PCA")
    dis.add_argument("--pca-threshold", type=float, default=95.0, help="cumulative explained %% cutoff")
    dis.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=True,
                     help="prepend an intercept column to the design")
    dis.add_argument("--mean-uncertainty", action="store_true",
                     help="add delta-method parameter uncertainty to the pointwise variances")
    dis.add_argument("--multistart", type=int, default=5)
    dis.add_argument("--max-iter", type=int, default=200)
    dis.add_argument("--grad-tol", type=float, default=1e-4)
    dis.add_argument("--rho-bounds", type=_float_pair, default=(-0.99, 0.99),
                     help="lo,hi (use the = form for negative lows: --rho-bounds=-0.9,0.9)")
    dis.add_argument("--phi-bounds", type=_float_pair, default=(-0.99, 0.99),
                     help="lo,hi (use the = form for negative lows: --phi-bounds=-0.9,0.9)")
    dis.add_argument("--seed", type=int, default=0)
    dis.add_argument("--out", required=True)
    dis.set_defaults(func=cmd_disaggregate)

    swp = sub.add_parser("sweep", help="run a Monte Carlo grid from a config file")
    swp.add_argument("--config", required=True, help="grid file: key = v1, v2, ...")
    swp.add_argument("--jobs", type=int, default=None,
                     help=f"worker processes (default ${JOBS_ENV_VAR} or 1)")
    swp.add_argument("--strict", action="store_true", help="nonzero exit when any run fails")
    swp.add_argument("--chi2-as-written", action="store_true",
                     help="report the literal signed per-region aggregate-error sum")
    swp.add_argument("--out", required=True)
    swp.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConvergenceError as exc:
        logger.error("convergence failure: %s", exc)
        return EXIT_CONVERGENCE
    except NUMERICAL_ERRORS as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except INPUT_ERRORS as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    except ValueError as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT


def console_main():
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(main())


if __name__ == "__main__":
    console_main()
