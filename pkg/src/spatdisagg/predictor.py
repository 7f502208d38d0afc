"""Constrained best linear unbiased prediction of the latent panel.

The predictor is the conditional expectation of the stacked panel given the
per-period totals (and any anchored cells), so the disaggregated values sum
to the observed aggregate exactly, by construction. Pointwise variances come
from the conditional covariance at the supplied parameters; parameter
uncertainty can optionally be folded into the mean via a delta method.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .covariance import AggregationOperator, ModelParams, StackedPanel, build_covariance
from .exceptions import CovarianceError, InfeasibleAnchorError, RedundantAnchorError
from .validation import check_aggregate, check_design

logger = logging.getLogger(__name__)

__all__ = [
    "ConstraintSystem",
    "DisaggregationResult",
    "blup",
    "anchored_blup",
    "pointwise_intervals",
    "save_disaggregation_csv",
]

COHERENCE_TOL = 1e-8
VAR_CLAMP_TOL = -1e-10


@dataclass(frozen=True)
class ConstraintSystem:
    """Aggregation rows stacked with single-cell anchoring rows.

    ``cells`` are (region, time) pairs, 0-based; each corresponds to one row
    of the selection matrix with a single unit entry. Periods in which every
    region is anchored are recorded so the redundant aggregation row can be
    dropped at solve time.
    """

    n: int
    T: int
    cells: tuple = ()
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    full_periods: tuple = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        cells = tuple((int(r), int(t)) for r, t in self.cells)
        if len(cells) != values.shape[0]:
            raise ValueError("anchor cells and values must have equal length")
        seen = {}
        dupes = []
        for cell in cells:
            r, t = cell
            if not (0 <= r < self.n and 0 <= t < self.T):
                raise ValueError(f"anchor cell {cell} outside the {self.n} x {self.T} panel")
            if cell in seen:
                dupes.append(cell)
            seen[cell] = True
        if dupes:
            raise RedundantAnchorError(dupes)
        counts = {}
        for _, t in cells:
            counts[t] = counts.get(t, 0) + 1
        full = tuple(sorted(t for t, c in counts.items() if c == self.n))
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "full_periods", full)

    @property
    def m(self):
        return len(self.cells)

    @property
    def stacked_rows(self):
        return self.T + self.m


@dataclass
class DisaggregationResult:
    """Disaggregated panel with pointwise variances and coherence evidence."""

    yhat: StackedPanel
    pointwise_var: np.ndarray
    coherence_residual: float
    anchored_cells: list = field(default_factory=list)

    def intervals(self, level: float):
        return pointwise_intervals(self, level)


def _clamp_variances(var):
    raw_min = float(var.min()) if var.size else 0.0
    if raw_min < 0:
        if raw_min < -1e-13:  # beyond plain roundoff; worth telling the user
            warnings.warn(
                f"clamping negative pointwise variances (min {raw_min:.3e}) to zero",
                UserWarning,
                stacklevel=3,
            )
        var = np.maximum(var, 0.0)
    return var


def _coherence(yhat_matrix, ya):
    return float(np.max(np.abs(yhat_matrix.sum(axis=1) - ya)))


def _mean_jacobian(cov, Z, beta):
    """d(unconditional mean)/d(beta, rho), stacked panel rows."""
    ainv_z = cov.filter.solve_panel(Z, cov.T)
    v1 = ainv_z @ beta
    v2 = (v1.reshape(cov.T, cov.n) @ cov.filter.w.T).ravel()
    dmu_drho = cov.filter.solve_panel(v2, cov.T)
    return np.column_stack([ainv_z, dmu_drho])


def _mean_uncertainty_blocks(param_cov, k):
    """Sub-covariance over (beta..., rho) from the full theta covariance."""
    idx = list(range(k)) + [k + 2]
    return param_cov[np.ix_(idx, idx)]


def blup(params: ModelParams, Z, ya, w, *, param_cov=None, mean_uncertainty=False) -> DisaggregationResult:
    """Disaggregate the aggregate series under the per-period sum constraint.

    The per-period residual between the observed total and the model-implied
    total is spread across regions in proportion to the smoothing vector
    g = S S' 1, which is exactly the conditional-expectation correction.
    Pointwise variances treat the parameters as known; pass ``param_cov``
    (theta covariance from the fit) with ``mean_uncertainty=True`` to add the
    delta-method contribution of the estimated mean.
    """
    cov = build_covariance(params, w, ya.shape[0] if hasattr(ya, "shape") else len(ya))
    n, T = cov.n, cov.T
    ya = check_aggregate(ya, T)
    Z = check_design(Z, n, T)
    agg = AggregationOperator(n, T)

    mu = cov.filter.solve_panel(Z @ params.beta, T)
    resid = ya - agg.apply(mu)
    correction = np.outer(resid, cov.smoothing / cov.scalar).ravel()
    yhat = mu + correction

    gram = cov.spatial_gram()
    cell_spatial = np.diag(gram) - cov.smoothing**2 / cov.scalar
    var = np.outer(np.diag(cov.sigma_u), cell_spatial).ravel()

    if mean_uncertainty:
        if param_cov is None:
            raise ValueError("mean_uncertainty=True requires param_cov from the fit")
        J = _mean_jacobian(cov, Z, params.beta)
        # Only the mean path is propagated; the correction operator is held fixed.
        cj = agg.apply(J)
        J_eff = J - np.repeat(cj / cov.scalar, n, axis=0) * np.tile(cov.smoothing, T)[:, None]
        sub = _mean_uncertainty_blocks(param_cov, params.k)
        var = var + np.einsum("qa,ab,qb->q", J_eff, sub, J_eff)

    var = _clamp_variances(var)
    panel = StackedPanel(values=yhat, n=n, T=T)
    return DisaggregationResult(
        yhat=panel,
        pointwise_var=var,
        coherence_residual=_coherence(panel.as_matrix(), ya),
        anchored_cells=[],
    )


def anchored_blup(
    params: ModelParams,
    Z,
    ya,
    anchors,
    w,
    *,
    param_cov=None,
    mean_uncertainty=False,
) -> DisaggregationResult:
    """Disaggregate with sparse known cells added as exact linear constraints.

    ``anchors`` is an iterable of ``(region, time, value)`` triples (0-based
    indices). A period in which every region is anchored makes its aggregation
    row redundant: the row is dropped (logged), after checking the anchors for
    consistency with the observed total. Anchored cells are reproduced exactly
    and their variance collapses to zero.
    """
    anchors = list(anchors or [])
    if not anchors:
        return blup(params, Z, ya, w, param_cov=param_cov, mean_uncertainty=mean_uncertainty)

    T = len(ya)
    cov = build_covariance(params, w, T)
    n = cov.n
    ya = check_aggregate(ya, T)
    Z = check_design(Z, n, T)
    agg = AggregationOperator(n, T)

    system = ConstraintSystem(
        n=n,
        T=T,
        cells=[(r, t) for r, t, _ in anchors],
        values=np.array([v for _, _, v in anchors], dtype=float),
    )

    # Fully anchored periods: verify the anchors reproduce the total, then
    # drop the redundant aggregation row to keep the system full rank.
    for t in system.full_periods:
        total = sum(v for (r, tt), v in zip(system.cells, system.values) if tt == t)
        tol = COHERENCE_TOL * max(1.0, abs(ya[t]))
        if abs(total - ya[t]) > tol:
            raise InfeasibleAnchorError(
                f"period {t} is fully anchored but anchors sum to {total:.6g} "
                f"while the aggregate is {ya[t]:.6g}"
            )
        logger.info("period %d fully anchored; dropping its redundant aggregation row", t)
    kept = np.array([t for t in range(T) if t not in system.full_periods], dtype=int)

    mu = cov.filter.solve_panel(Z @ params.beta, T)
    mu_matrix = mu.reshape(T, n)

    regions = np.array([r for r, _ in system.cells], dtype=int)
    times = np.array([t for _, t in system.cells], dtype=int)
    gram = cov.spatial_gram()
    g = cov.smoothing
    sigma = cov.sigma_u

    # Gram matrix of the stacked constraints against the panel covariance.
    g_cc = cov.scalar * sigma[np.ix_(kept, kept)]
    g_ch = sigma[np.ix_(kept, times)] * g[regions][None, :]
    g_hh = sigma[np.ix_(times, times)] * gram[np.ix_(regions, regions)]
    G = np.block([[g_cc, g_ch], [g_ch.T, g_hh]])

    resid_c = ya[kept] - agg.apply(mu)[kept]
    resid_h = system.values - mu_matrix[times, regions]
    resid = np.concatenate([resid_c, resid_h])

    try:
        G_chol = cho_factor(G)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(
            "stacked constraint covariance is not positive definite; "
            "anchors may be numerically redundant"
        ) from exc
    v = cho_solve(G_chol, resid)
    v_c, v_h = v[: kept.size], v[kept.size :]

    corr_c = np.outer(sigma[:, kept] @ v_c, g)  # (T, n)
    corr_h = (sigma[:, times] * v_h[None, :]) @ gram[:, regions].T
    yhat = mu + (corr_c + corr_h).ravel()

    # Cross-covariance of every cell with the stacked constraints.
    u_c = sigma[:, kept][:, None, :] * g[None, :, None]  # (T, n, |kept|)
    u_h = sigma[:, times][:, None, :] * gram[:, regions][None, :, :]  # (T, n, m)
    U = np.concatenate([u_c, u_h], axis=2).reshape(n * T, kept.size + system.m)
    reduction = np.sum(U * cho_solve(G_chol, U.T).T, axis=1)
    var = np.outer(np.diag(sigma), np.diag(gram)).ravel() - reduction

    if mean_uncertainty:
        if param_cov is None:
            raise ValueError("mean_uncertainty=True requires param_cov from the fit")
        J = _mean_jacobian(cov, Z, params.beta)
        cj = np.concatenate([agg.apply(J)[kept], J[times * n + regions]], axis=0)
        J_eff = J - U @ cho_solve(G_chol, cj)
        sub = _mean_uncertainty_blocks(param_cov, params.k)
        var = var + np.einsum("qa,ab,qb->q", J_eff, sub, J_eff)

    var = _clamp_variances(var)
    panel = StackedPanel(values=yhat, n=n, T=T)
    return DisaggregationResult(
        yhat=panel,
        pointwise_var=var,
        coherence_residual=_coherence(panel.as_matrix(), ya),
        anchored_cells=[(int(r), int(t), float(val)) for (r, t), val in zip(system.cells, system.values)],
    )


def pointwise_intervals(result: DisaggregationResult, level: float):
    """Gaussian pointwise interval (lo, hi) arrays at the given coverage level."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1); got {level}")
    z = norm.ppf(0.5 * (1.0 + level))
    half = z * np.sqrt(result.pointwise_var)
    return result.yhat.values - half, result.yhat.values + half


def save_disaggregation_csv(result: DisaggregationResult, path):
    """Long-format export with 90/95/99 percent intervals, 1-based indices."""
    panel = result.yhat
    columns = [
        np.tile(np.arange(1, panel.n + 1), panel.T),
        np.repeat(np.arange(1, panel.T + 1), panel.n),
        panel.values,
        result.pointwise_var,
    ]
    for level in (0.90, 0.95, 0.99):
        lo, hi = pointwise_intervals(result, level)
        columns.extend([lo, hi])
    data = np.column_stack(columns)
    header = "region,time,yhat,var,lo90,hi90,lo95,hi95,lo99,hi99"
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.15g")
