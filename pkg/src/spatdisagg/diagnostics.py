"""Theoretical explained-variance summaries and empirical fit metrics."""

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .covariance import DEFAULT_CAP, ModelParams, StackedPanel, build_covariance
from .exceptions import TooLargeError, UndefinedMetricError
from .predictor import ConstraintSystem

__all__ = [
    "TheoreticalSummary",
    "MetricReport",
    "theoretical_summary",
    "empirical_metrics",
]

ZERO_TRUTH_TOL = 1e-12


@dataclass(frozen=True)
class TheoreticalSummary:
    """Model-implied explained variance and RMSE at fixed parameters.

    The disaggregated quantities condition on the observed aggregate (and any
    anchors); the aggregate quantities condition on the covariates alone.
    """

    r2_disagg: float
    r2_agg: float
    rmse_disagg: float
    rmse_agg: float


@dataclass(frozen=True)
class MetricReport:
    """Empirical accuracy of a disaggregation against a reference panel."""

    r2: float
    mape: float
    rrmse: float
    rmse: float
    chi2: float
    per_region_breakdown: tuple = ()
    mape_excluded: int = 0

    def to_dict(self):
        return {
            "r2": self.r2,
            "mape": self.mape,
            "rrmse": self.rrmse,
            "rmse": self.rmse,
            "chi2": self.chi2,
            "mape_excluded_cells": self.mape_excluded,
            "per_region": [
                {"region": r, "mape": m, "rrmse": rr, "r2": q}
                for r, m, rr, q in self.per_region_breakdown
            ],
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    csv_header = "r2,mape,rrmse,rmse,chi2,mape_excluded"

    def to_csv_row(self):
        vals = (self.r2, self.mape, self.rrmse, self.rmse, self.chi2)
        return ",".join(f"{v:.15g}" for v in vals) + f",{self.mape_excluded}"


def _anchored_reduction_trace(cov, anchors):
    """Trace removed from the panel covariance by the stacked constraints."""
    n, T = cov.n, cov.T
    system = ConstraintSystem(n=n, T=T, cells=[(r, t) for r, t in anchors], values=np.zeros(len(anchors)))
    kept = np.array([t for t in range(T) if t not in system.full_periods], dtype=int)
    regions = np.array([r for r, _ in system.cells], dtype=int)
    times = np.array([t for _, t in system.cells], dtype=int)
    gram = cov.spatial_gram()
    g = cov.smoothing
    sigma = cov.sigma_u

    g_cc = cov.scalar * sigma[np.ix_(kept, kept)]
    g_ch = sigma[np.ix_(kept, times)] * g[regions][None, :]
    g_hh = sigma[np.ix_(times, times)] * gram[np.ix_(regions, regions)]
    G = np.block([[g_cc, g_ch], [g_ch.T, g_hh]])
    u_c = sigma[:, kept][:, None, :] * g[None, :, None]
    u_h = sigma[:, times][:, None, :] * gram[:, regions][None, :, :]
    U = np.concatenate([u_c, u_h], axis=2).reshape(n * T, -1)
    chol = cho_factor(G)
    return float(np.sum(U * cho_solve(chol, U.T).T))


def theoretical_summary(params: ModelParams, w, T: int, anchors=None, cap: int = DEFAULT_CAP) -> TheoreticalSummary:
    """Trace-based explained variance and RMSE implied by the parameters.

    ``anchors`` is an optional list of (region, time) pairs; anchoring can
    only shrink the disaggregated conditional variance. Aggregate-level
    quantities use Var(Ya | Z) = C Var(Y | Z) C'; because the aggregate is
    itself the conditioning benchmark, its explained share is identically
    zero and its RMSE scales with the innovation standard deviation.
    """
    cov = build_covariance(params, w, T)
    n = cov.n
    if n * T > cap:
        raise TooLargeError(f"n*T = {n * T} exceeds the materialization cap of {cap}")

    gram = cov.spatial_gram()
    tr_sigma = float(np.trace(cov.sigma_u))
    tr_uncond = tr_sigma * float(np.trace(gram))

    if anchors:
        reduction = _anchored_reduction_trace(cov, [(r, t) for r, t, *_ in anchors])
        tr_cond = tr_uncond - reduction
    else:
        tr_cond = tr_sigma * float(np.trace(gram) - cov.smoothing @ cov.smoothing / cov.scalar)
    tr_cond = max(tr_cond, 0.0)

    # Aggregate level: Var(Ya) and Var(Ya | Z) are both C Cov(Y) C'.
    tr_agg = float(np.trace(cov.agg_cov))
    tr_agg_cond = cov.scalar * tr_sigma

    return TheoreticalSummary(
        r2_disagg=1.0 - tr_cond / tr_uncond,
        r2_agg=1.0 - tr_agg_cond / tr_agg,
        rmse_disagg=float(np.sqrt(tr_cond / (n * T))),
        rmse_agg=float(np.sqrt(tr_agg_cond / T)),
    )


def empirical_metrics(truth: StackedPanel, estimate: StackedPanel, *, chi2_squared: bool = True) -> MetricReport:
    """R2, MAPE, RRMSE, RMSE and the per-region aggregate-error statistic.

    Cells with |truth| below 1e-12 are excluded from MAPE and their count
    reported. ``chi2_squared=False`` computes the literal signed sum of
    per-region relative aggregate errors instead of the squared form.
    """
    if truth.n != estimate.n or truth.T != estimate.T:
        raise ValueError(
            f"panel shapes differ: {truth.n} x {truth.T} vs {estimate.n} x {estimate.T}"
        )
    y = truth.as_matrix()  # (T, n)
    yhat = estimate.as_matrix()
    resid = y - yhat
    nT = y.size

    rmse = float(np.sqrt(np.mean(resid**2)))
    ybar = float(y.mean())
    if abs(ybar) < ZERO_TRUTH_TOL:
        warnings.warn("mean of the reference panel is zero; RRMSE undefined", UserWarning, stacklevel=2)
        rrmse = float("nan")
    else:
        rrmse = rmse / ybar

    ss_tot = float(np.sum((y - ybar) ** 2))
    if ss_tot <= 0:
        raise UndefinedMetricError("reference panel has zero total variance; R2 undefined")
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot

    mask = np.abs(y) >= ZERO_TRUTH_TOL
    excluded = int(nT - mask.sum())
    if excluded == nT:
        raise UndefinedMetricError("every reference cell is zero; MAPE undefined")
    mape = float(np.mean(np.abs(resid[mask] / y[mask]))) * 100.0

    region_truth_totals = y.sum(axis=0)  # (n,)
    if np.any(np.abs(region_truth_totals) < ZERO_TRUTH_TOL):
        bad = np.flatnonzero(np.abs(region_truth_totals) < ZERO_TRUTH_TOL)
        raise UndefinedMetricError(f"regions {bad.tolist()} have zero reference totals; chi2 undefined")
    rel = resid.sum(axis=0) / region_truth_totals
    chi2 = float(np.sum(rel**2)) if chi2_squared else float(np.sum(rel))

    breakdown = []
    for i in range(truth.n):
        yi, ei = y[:, i], resid[:, i]
        mi = np.abs(yi) >= ZERO_TRUTH_TOL
        mape_i = float(np.mean(np.abs(ei[mi] / yi[mi]))) * 100.0 if mi.any() else float("nan")
        rmse_i = float(np.sqrt(np.mean(ei**2)))
        mean_i = float(yi.mean())
        rrmse_i = rmse_i / mean_i if abs(mean_i) > ZERO_TRUTH_TOL else float("nan")
        ss_i = float(np.sum((yi - mean_i) ** 2))
        r2_i = 1.0 - float(np.sum(ei**2)) / ss_i if ss_i > 0 else float("nan")
        breakdown.append((i, mape_i, rrmse_i, r2_i))

    return MetricReport(
        r2=r2,
        mape=mape,
        rrmse=rrmse,
        rmse=rmse,
        chi2=chi2,
        per_region_breakdown=tuple(breakdown),
        mape_excluded=excluded,
    )
