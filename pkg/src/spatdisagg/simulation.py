"""Synthetic data generation and the Monte Carlo sweep harness.

Scenarios place n = k^2 regions on a square grid with queen contiguity, draw
an intercept-plus-uniform covariate design, route stationary AR(1) noise
through the spatial filter, and aggregate. Sweeps run the full estimation and
disaggregation pipeline over a cartesian grid with per-run seed isolation, so
results are reproducible regardless of execution order or worker count.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import pandas as pd

from .covariance import SpatialFilter, StackedPanel
from .diagnostics import MetricReport, empirical_metrics
from .estimator import EstimationConfig, FitResult, fit
from .exceptions import SpatialDisaggError
from .predictor import anchored_blup, blup
from .weights import SpatialWeights, build_grid_adjacency

logger = logging.getLogger(__name__)

__all__ = [
    "ScenarioSpec",
    "SimulatedData",
    "RunRecord",
    "SweepSummary",
    "generate",
    "ratio_category",
    "run_scenario",
    "sweep",
    "load_sweep_config",
    "run_seed",
]

RUN_COLUMNS = [
    "n", "T", "rho", "phi", "beta1", "sigma", "seed", "ratio", "category",
    "rmse", "rrmse", "mape", "r2", "chi2",
    "rho_hat", "phi_hat", "sigma2_hat", "converged",
]

METRIC_COLUMNS = ["rmse", "rrmse", "mape", "r2", "chi2"]


@dataclass(frozen=True)
class ScenarioSpec:
    """One synthetic configuration: grid side, length, parameters, and seed."""

    k: int
    T: int
    rho: float
    phi: float
    beta0: float = 1.0
    beta1: float = 1.0
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("grid side k must be >= 2")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not abs(self.rho) < 1:
            raise ValueError(f"|rho| must be < 1; got {self.rho}")
        if not abs(self.phi) < 1:
            raise ValueError(f"|phi| must be < 1; got {self.phi}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def n(self):
        return self.k * self.k

    @property
    def ratio(self):
        return self.beta1 / self.sigma**2


@dataclass(frozen=True)
class SimulatedData:
    Z: np.ndarray
    y_true: StackedPanel
    ya: np.ndarray
    weights: SpatialWeights


def ratio_category(ratio: float) -> str:
    """Signal-to-noise bucket for ratio = beta1 / sigma^2."""
    if ratio < 5:
        return "Low"
    if ratio < 50:
        return "Medium"
    if ratio <= 500:
        return "High"
    return "Very High"


def generate(spec: ScenarioSpec) -> SimulatedData:
    """Draw one synthetic panel; deterministic per seed.

    Draw order is fixed (covariate, AR starting values, innovations) so the
    output is bit-identical across runs for a given spec.
    """
    w = build_grid_adjacency(spec.k)
    n, T = spec.n, spec.T
    rng = np.random.default_rng(spec.seed)

    Z = np.column_stack([np.ones(n * T), rng.uniform(size=n * T)])
    beta = np.array([spec.beta0, spec.beta1])

    # Stationary AR(1) noise per region: start from the stationary law, then recurse.
    sd_stat = spec.sigma / np.sqrt(1.0 - spec.phi**2)
    u = np.empty((n, T))
    u[:, 0] = rng.normal(scale=sd_stat, size=n)
    eps = rng.normal(scale=spec.sigma, size=(n, T - 1))
    for t in range(1, T):
        u[:, t] = spec.phi * u[:, t - 1] + eps[:, t - 1]
    u_stacked = u.T.ravel()  # region-fastest

    filt = SpatialFilter(w, spec.rho)
    y_values = filt.solve_panel(Z @ beta + u_stacked, T)
    y_true = StackedPanel(values=y_values, n=n, T=T)
    ya = y_true.as_matrix().sum(axis=1)
    return SimulatedData(Z=Z, y_true=y_true, ya=ya, weights=w)


@dataclass
class RunRecord:
    """Outcome of one scenario: metrics and estimates, or a recorded failure."""

    spec: ScenarioSpec
    fit_result: FitResult | None = None
    metrics: MetricReport | None = None
    error: str | None = None

    @property
    def failed(self):
        return self.error is not None

    def to_row(self) -> dict:
        spec = self.spec
        row = {
            "n": spec.n,
            "T": spec.T,
            "rho": spec.rho,
            "phi": spec.phi,
            "beta1": spec.beta1,
            "sigma": spec.sigma,
            "seed": spec.seed,
            "ratio": spec.ratio,
            "category": ratio_category(spec.ratio),
            "rmse": np.nan,
            "rrmse": np.nan,
            "mape": np.nan,
            "r2": np.nan,
            "chi2": np.nan,
            "rho_hat": np.nan,
            "phi_hat": np.nan,
            "sigma2_hat": np.nan,
            "converged": False,
            "error": self.error or "",
        }
        if self.fit_result is not None:
            p = self.fit_result.params
            row.update(
                rho_hat=p.rho, phi_hat=p.phi1, sigma2_hat=p.sigma2,
                converged=bool(self.fit_result.converged),
            )
        if self.metrics is not None:
            row.update(
                rmse=self.metrics.rmse, rrmse=self.metrics.rrmse,
                mape=self.metrics.mape, r2=self.metrics.r2, chi2=self.metrics.chi2,
            )
        return row


def run_scenario(
    spec: ScenarioSpec,
    anchors=None,
    config: EstimationConfig | None = None,
    chi2_squared: bool = True,
) -> RunRecord:
    """Generate, estimate, disaggregate, and score one scenario.

    Failures (non-convergence, singular filters at extreme rho, undefined
    metrics) are recorded on the returned record instead of raised, so sweeps
    continue past pathological corners.
    """
    record = RunRecord(spec=spec)
    try:
        data = generate(spec)
    except SpatialDisaggError as exc:
        record.error = f"generate: {exc}"
        return record
    cfg = config or EstimationConfig(seed=spec.seed)
    try:
        record.fit_result = fit(data.Z, data.ya, data.weights, cfg)
    except (SpatialDisaggError, np.linalg.LinAlgError) as exc:
        record.error = f"fit: {exc}"
        return record
    try:
        params = record.fit_result.params
        if anchors:
            result = anchored_blup(params, data.Z, data.ya, anchors, data.weights)
        else:
            result = blup(params, data.Z, data.ya, data.weights)
        record.metrics = empirical_metrics(data.y_true, result.yhat, chi2_squared=chi2_squared)
    except (SpatialDisaggError, np.linalg.LinAlgError) as exc:
        record.error = f"predict: {exc}"
    return record


def run_seed(base_seed: int, index: int) -> int:
    """Stable per-run seed, independent of execution order and worker count."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def _expand_grid(grid: dict):
    """Cartesian product of grid lists into ScenarioSpec kwargs (seedless)."""
    names = ["n", "T", "rho", "phi", "beta0", "beta1", "sigma"]
    defaults = {"beta0": [1.0]}
    values = []
    for name in names:
        vals = grid.get(name, defaults.get(name))
        if vals is None:
            raise ValueError(f"sweep grid is missing values for {name!r}")
        vals = list(vals)
        if not vals:
            raise ValueError(f"sweep grid has an empty list for {name!r}")
        values.append(vals)
    combos = []
    for n, T, rho, phi, beta0, beta1, sigma in product(*values):
        k = int(round(np.sqrt(n)))
        if k * k != int(n):
            raise ValueError(f"n = {n} is not a perfect square")
        combos.append(dict(k=k, T=int(T), rho=float(rho), phi=float(phi),
                           beta0=float(beta0), beta1=float(beta1), sigma=float(sigma)))
    return combos


def _run_indexed(args):
    index, spec, config, chi2_squared = args
    return index, run_scenario(spec, config=config, chi2_squared=chi2_squared).to_row()


@dataclass
class SweepSummary:
    """Per-run table plus the grouped summaries of a finished sweep."""

    runs: pd.DataFrame
    replications: int
    failure_count: int = field(init=False)

    def __post_init__(self):
        self.failure_count = int((self.runs["error"] != "").sum())

    def runs_frame(self) -> pd.DataFrame:
        """The tidy per-run table (documented column contract)."""
        return self.runs[RUN_COLUMNS].copy()

    def by_category(self) -> pd.DataFrame:
        """Mean/median/quartile metrics grouped by (category, n)."""
        ok = self.runs[self.runs["error"] == ""]
        grouped = ok.groupby(["category", "n"])[METRIC_COLUMNS]
        out = pd.concat(
            [
                grouped.mean().add_suffix("_mean"),
                grouped.median().add_suffix("_median"),
                grouped.quantile(0.25).add_suffix("_q25"),
                grouped.quantile(0.75).add_suffix("_q75"),
            ],
            axis=1,
        )
        counts = self.runs.groupby(["category", "n"]).size().rename("runs")
        fails = (
            self.runs.groupby(["category", "n"])["error"]
            .apply(lambda s: int((s != "").sum()))
            .rename("failures")
        )
        return out.join(counts).join(fails).reset_index()

    def by_cell(self) -> pd.DataFrame:
        """Median and quartiles grouped by (n, T, category)."""
        return self._quartile_summary(["n", "T", "category"])

    def by_rho_cell(self) -> pd.DataFrame:
        """Median and quartiles grouped by (n, T, rho, category)."""
        return self._quartile_summary(["n", "T", "rho", "category"])

    def _quartile_summary(self, keys) -> pd.DataFrame:
        ok = self.runs[self.runs["error"] == ""]
        grouped = ok.groupby(keys)[METRIC_COLUMNS]
        med = grouped.median().add_suffix("_median")
        q25 = grouped.quantile(0.25).add_suffix("_q25")
        q75 = grouped.quantile(0.75).add_suffix("_q75")
        counts = self.runs.groupby(keys).size().rename("runs")
        return med.join(q25).join(q75).join(counts).reset_index()


def sweep(
    grid: dict,
    replications: int = 5,
    jobs: int = 1,
    base_seed: int = 0,
    config: EstimationConfig | None = None,
    chi2_squared: bool = True,
) -> SweepSummary:
    """Run every grid combination x replication, with per-run isolation.

    A failed run is logged and kept as a row with blank metrics; the sweep
    never aborts. ``jobs > 1`` fans runs out to a process pool; per-run seeds
    are derived from (base_seed, run_index) so results do not depend on
    scheduling.
    """
    combos = _expand_grid(grid)
    if not combos:
        raise ValueError("sweep grid is empty")
    if replications < 1:
        raise ValueError("replications must be >= 1")

    tasks = []
    index = 0
    for combo in combos:
        for _ in range(replications):
            spec = ScenarioSpec(seed=run_seed(base_seed, index), **combo)
            cfg = config if config is not None else EstimationConfig(seed=spec.seed)
            tasks.append((index, spec, cfg, chi2_squared))
            index += 1

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_indexed, tasks, chunksize=8))
    else:
        results = [_run_indexed(t) for t in tasks]

    results.sort(key=lambda pair: pair[0])
    rows = [row for _, row in results]
    runs = pd.DataFrame(rows)
    summary = SweepSummary(runs=runs, replications=replications)
    if summary.failure_count:
        logger.warning("sweep finished with %d failed runs of %d", summary.failure_count, len(rows))
    return summary


def load_sweep_config(path) -> dict:
    """Parse a ``key = v1, v2, ...`` grid file into sweep() arguments.

    Recognized keys: n, T, rho, phi, beta0, beta1, sigma (lists) and
    replications, base_seed (scalars). ``#`` starts a comment.
    """
    grid = {}
    scalars = {}
    list_keys = {"n", "T", "rho", "phi", "beta0", "beta1", "sigma"}
    scalar_keys = {"replications", "base_seed"}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = values', got {line!r}")
            key, _, rhs = line.partition("=")
            key = key.strip()
            vals = [v for chunk in rhs.split(",") for v in chunk.split()]
            if key in list_keys:
                grid[key] = [int(v) if key in ("n", "T") else float(v) for v in vals]
            elif key in scalar_keys:
                scalars[key] = int(vals[0])
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    if not grid:
        raise ValueError(f"{path}: no grid values found")
    missing = sorted((list_keys - {"beta0"}) - grid.keys())
    if missing:
        raise ValueError(f"{path}: missing grid values for {missing}")
    return {"grid": grid, **scalars}
