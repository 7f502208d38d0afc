"""Quasi-likelihood estimation of the panel parameters from aggregated data.

The Gaussian objective is profiled: at each (rho, phi1, sigma2) the
regression coefficients are the GLS solution against the aggregated
covariance, so the optimizer works in three dimensions with box constraints
(L-BFGS-B, sigma2 in log scale). The analytic gradient of the concentrated
objective equals the partial score at the profiled coefficients, which the
tests verify against finite differences.

All log-likelihood values omit the additive -(T/2) log(2 pi) constant.
"""

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.linalg import cho_solve, cholesky, qr, solve_triangular

from .covariance import (
    AggregationOperator,
    ModelParams,
    SpatialFilter,
    ar1_covariance,
    ar1_covariance_dphi,
)
from .exceptions import (
    ConvergenceError,
    CovarianceError,
    NearSingularError,
    RankDeficientError,
)
from .validation import check_aggregate, check_design, check_interval, column_scale_ratio
from .weights import SpatialWeights

logger = logging.getLogger(__name__)

__all__ = [
    "EstimationConfig",
    "FitResult",
    "gls_beta",
    "loglik",
    "concentrated_negloglik",
    "score",
    "fit",
]

PENALTY = 1e12
BOUNDARY_RHO = 0.95
BOUNDARY_PHI = 0.99

# Coarse lattice over (rho, phi1) from which multistart points are taken,
# guarding against multimodality near strong spatial autocorrelation.
START_LATTICE = (
    (0.0, 0.0),
    (0.5, 0.5),
    (-0.5, -0.5),
    (0.5, -0.5),
    (-0.5, 0.5),
    (0.0, 0.5),
    (0.0, -0.5),
    (0.5, 0.0),
    (-0.5, 0.0),
)


@dataclass(frozen=True)
class EstimationConfig:
    """Optimizer settings: box bounds, multistart count, tolerances, seed."""

    rho_bounds: tuple = (-0.99, 0.99)
    phi_bounds: tuple = (-0.99, 0.99)
    sigma2_min: float = 1e-8
    multistart: int = 5
    max_iter: int = 200
    grad_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        for name, (lo, hi) in (("rho_bounds", self.rho_bounds), ("phi_bounds", self.phi_bounds)):
            if not (-1.0 < lo < hi < 1.0):
                raise ValueError(f"{name} must satisfy -1 < lo < hi < 1; got ({lo}, {hi})")
        if not self.sigma2_min > 0:
            raise ValueError("sigma2_min must be positive")
        if self.multistart < 1:
            raise ValueError("multistart must be >= 1")


@dataclass
class FitResult:
    """Estimated parameters plus everything needed to judge the fit.

    ``std_errors`` follows the theta order (beta..., sigma2, phi1, rho) and is
    None whenever the observed information matrix is not positive definite.
    """

    params: ModelParams
    loglik: float
    std_errors: np.ndarray | None
    gradient_norm: float
    converged: bool
    condition_warnings: list = field(default_factory=list)
    optimizer_trace: list = field(default_factory=list)
    param_cov: np.ndarray | None = None

    @property
    def param_names(self):
        k = self.params.k
        return [f"beta_{i}" for i in range(k)] + ["sigma2", "phi1", "rho"]

    def to_dict(self):
        names = self.param_names
        theta = self.params.theta()
        out = {
            "params": {name: float(v) for name, v in zip(names, theta)},
            "loglik": float(self.loglik),
            "std_errors": None
            if self.std_errors is None
            else {name: float(v) for name, v in zip(names, self.std_errors)},
            "gradient_norm": float(self.gradient_norm),
            "converged": bool(self.converged),
            "condition_warnings": list(self.condition_warnings),
            "n_starts": len(self.optimizer_trace),
        }
        return out


def _weights_matrix(w):
    return w.w if isinstance(w, SpatialWeights) else np.asarray(w, dtype=float)


class _Context:
    """Shared factorizations for one (rho, phi1) pair.

    Holds the spatial filter, the whitened aggregated design, the profiled
    GLS coefficients, and the residual quadratics that every likelihood
    quantity is assembled from.
    """

    def __init__(self, rho, phi1, Z, ya, w):
        wmat = _weights_matrix(w)
        self.rho = float(rho)
        self.phi1 = float(phi1)
        self.ya = ya
        self.T = ya.shape[0]
        self.k = Z.shape[1]
        self.filter = SpatialFilter(wmat, rho)
        n = self.filter.n
        self.n = n
        self.agg = AggregationOperator(n, self.T)

        ones = np.ones(n)
        self.h = self.filter.solve(ones, transpose=True)  # S' 1
        self.g = self.filter.solve(self.h)  # S S' 1
        self.scalar = float(self.h @ self.h)

        self.ainv_z = self.filter.solve_panel(Z, self.T)  # (n T, k)
        self.X = self.agg.apply(self.ainv_z)  # (T, k)

        self.toe = ar1_covariance(phi1, 1.0, self.T)  # unit-variance AR(1) covariance
        try:
            self.L = cholesky(self.toe, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - PD for |phi1| < 1
            raise CovarianceError(f"AR(1) covariance not positive definite at phi1={phi1}") from exc
        self.logdet_toe = 2.0 * float(np.sum(np.log(np.diag(self.L))))

        Xw = solve_triangular(self.L, self.X, lower=True)
        yw = solve_triangular(self.L, ya, lower=True)
        beta, _, rank, _ = np.linalg.lstsq(Xw, yw, rcond=None)
        if rank < self.k:
            _, R, piv = qr(Xw, mode="economic", pivoting=True)
            tol = np.abs(R[0, 0]) * max(Xw.shape) * np.finfo(float).eps if R.size else 0.0
            deficient = sorted(int(c) for c in piv[np.abs(np.diag(R)) <= tol]) or sorted(
                int(c) for c in piv[rank:]
            )
            raise RankDeficientError(deficient)
        self.beta = beta
        self.e = ya - self.X @ beta
        self.toe_inv_e = cho_solve((self.L, True), self.e)
        self.q_unit = float(self.e @ self.toe_inv_e)  # e' Toe^{-1} e

    # -- quantities that need sigma2 ------------------------------------

    def quad(self, sigma2):
        """e' B^{-1} e for B = sigma2 * scalar * Toe."""
        return self.q_unit / (sigma2 * self.scalar)

    def logdet(self, sigma2):
        return self.T * math.log(sigma2 * self.scalar) + self.logdet_toe

    def negloglik(self, sigma2):
        return 0.5 * (self.logdet(sigma2) + self.quad(sigma2))

    # -- score pieces (at the context's own beta unless overridden) -----

    def dmu_drho(self, beta):
        """d/drho of the aggregated mean, via dA^{-1} = A^{-1} (I (x) W) A^{-1}."""
        v1 = self.ainv_z @ beta  # A^{-1} Z beta, stacked
        v2 = (v1.reshape(self.T, self.n) @ self.filter.w.T).ravel()
        v3 = self.filter.solve_panel(v2, self.T)
        return self.agg.apply(v3)

    def dscalar_drho(self):
        return 2.0 * float(self.h @ (self.filter.w @ self.g))

    def score_blocks(self, sigma2, beta=None):
        """Gradient of the log-likelihood in the order (beta, sigma2, phi1, rho)."""
        if beta is None:
            beta = self.beta
            e = self.e
            toe_inv_e = self.toe_inv_e
        else:
            e = self.ya - self.X @ beta
            toe_inv_e = cho_solve((self.L, True), e)
        denom = sigma2 * self.scalar
        w_vec = toe_inv_e / denom
        q = float(e @ toe_inv_e) / denom

        g_beta = self.X.T @ w_vec
        g_sigma2 = (q - self.T) / (2.0 * sigma2)

        dtoe = ar1_covariance_dphi(self.phi1, 1.0, self.T)
        tr_phi = float(np.trace(cho_solve((self.L, True), dtoe)))
        g_phi = -0.5 * tr_phi + 0.5 * denom * float(w_vec @ dtoe @ w_vec)

        dscalar = self.dscalar_drho()
        g_rho = float(self.dmu_drho(beta) @ w_vec) + (dscalar / self.scalar) * (q - self.T) / 2.0
        return np.concatenate([g_beta, [g_sigma2, g_phi, g_rho]])


def gls_beta(rho, phi1, sigma2, Z, ya, w) -> np.ndarray:
    """GLS coefficients of the aggregated regression at fixed (rho, phi1, sigma2).

    Solves via Cholesky whitening of the aggregated covariance followed by a
    least-squares factorization of the whitened design (no normal equations).
    Raises :class:`RankDeficientError` naming dependent columns when the
    design loses rank.
    """
    check_interval(phi1, -1.0, 1.0, "phi1")
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive; got {sigma2}")
    ya = np.asarray(ya, dtype=float)
    Z = np.asarray(Z, dtype=float)
    return _Context(rho, phi1, Z, ya, w).beta


def loglik(params: ModelParams, Z, ya, w) -> float:
    """Gaussian log-likelihood of the aggregate series at the given parameters."""
    ya = np.asarray(ya, dtype=float)
    Z = np.asarray(Z, dtype=float)
    ctx = _Context(params.rho, params.phi1, Z, ya, w)
    e = ya - ctx.X @ params.beta
    toe_inv_e = cho_solve((ctx.L, True), e)
    q = float(e @ toe_inv_e) / (params.sigma2 * ctx.scalar)
    return -0.5 * (ctx.logdet(params.sigma2) + q)


def concentrated_negloglik(rho, phi1, sigma2, Z, ya, w) -> float:
    """Negative log-likelihood with the regression coefficients profiled out.

    When the covariance cannot be factored (near-singular spatial filter) a
    large penalty value is returned and a warning is emitted, which keeps
    box-constrained optimizers inside the feasible region.
    """
    ya = np.asarray(ya, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive; got {sigma2}")
    try:
        return _Context(rho, phi1, Z, ya, w).negloglik(sigma2)
    except (NearSingularError, CovarianceError) as exc:
        warnings.warn(f"covariance unusable at rho={rho}, phi1={phi1}: {exc}", UserWarning, stacklevel=2)
        return PENALTY


def score(params: ModelParams, Z, ya, w) -> np.ndarray:
    """Analytic log-likelihood gradient, ordered (beta..., sigma2, phi1, rho)."""
    ya = np.asarray(ya, dtype=float)
    Z = np.asarray(Z, dtype=float)
    ctx = _Context(params.rho, params.phi1, Z, ya, w)
    return ctx.score_blocks(params.sigma2, beta=params.beta)


def _profile_sigma2(ctx: _Context, floor: float) -> float:
    """Moment-matching start value: the exact profile optimum of sigma2."""
    return max(ctx.q_unit / (ctx.scalar * ctx.T), floor)


def _start_points(config: EstimationConfig):
    rlo, rhi = config.rho_bounds
    plo, phi = config.phi_bounds
    clip = lambda v, lo, hi: min(max(v, lo + 1e-3), hi - 1e-3)
    pts = [(clip(r, rlo, rhi), clip(p, plo, phi)) for r, p in START_LATTICE]
    if config.multistart > len(pts):
        rng = np.random.default_rng(config.seed)
        for _ in range(config.multistart - len(pts)):
            pts.append(
                (rng.uniform(rlo + 1e-3, rhi - 1e-3), rng.uniform(plo + 1e-3, phi - 1e-3))
            )
    return pts[: config.multistart]


def _run_start(index, start, Z, ya, w, config):
    """One L-BFGS-B run over (rho, phi1, log sigma2). Returns a trace dict."""
    trace = {"start_index": index, "start": start, "iterates": [], "penalties": 0}

    def objective(u):
        rho, phi1, log_s2 = u
        sigma2 = math.exp(log_s2)
        try:
            ctx = _Context(rho, phi1, Z, ya, w)
        except (NearSingularError, CovarianceError):
            trace["penalties"] += 1
            return PENALTY, np.zeros(3)
        value = ctx.negloglik(sigma2)
        full = ctx.score_blocks(sigma2)
        # Envelope: at the profiled beta the concentrated gradient equals the
        # partial score; sigma2 is chained into log scale.
        grad = np.array([-full[-1], -full[-2], -full[-3] * sigma2])
        if len(trace["iterates"]) < 20000:
            trace["iterates"].append((float(rho), float(phi1), float(sigma2), float(value)))
        return value, grad

    try:
        ctx0 = _Context(start[0], start[1], Z, ya, w)
        sigma2_0 = _profile_sigma2(ctx0, config.sigma2_min)
    except (NearSingularError, CovarianceError):
        sigma2_0 = 1.0
    u0 = np.array([start[0], start[1], math.log(sigma2_0)])
    bounds = [config.rho_bounds, config.phi_bounds, (math.log(config.sigma2_min), 50.0)]
    options = {"maxiter": config.max_iter, "gtol": config.grad_tol, "ftol": 1e-14}
    res = optimize.minimize(objective, u0, jac=True, method="L-BFGS-B", bounds=bounds, options=options)
    # L-BFGS-B can stop on its relative-decrease test with the projected
    # gradient still above tolerance; restarting resets the curvature model
    # and usually closes the gap in a handful of iterations.
    for _ in range(3):
        if not np.isfinite(res.fun) or res.fun >= PENALTY / 2:
            break
        _, grad = objective(res.x)
        if np.max(np.abs(_projected_gradient(res.x, grad, bounds))) <= config.grad_tol:
            break
        restarted = optimize.minimize(
            objective, res.x, jac=True, method="L-BFGS-B", bounds=bounds, options=options
        )
        if restarted.fun >= res.fun - 1e-15:
            res = restarted if restarted.fun < res.fun else res
            break
        res = restarted
    trace.update(
        {
            "final": res.x.tolist(),
            "objective": float(res.fun),
            "success": bool(res.success),
            "message": str(res.message),
            "n_evals": int(res.nfev),
        }
    )
    return res, trace


def _projected_gradient(u, grad, bounds, tol=1e-10):
    """Zero out gradient components that point outside an active box bound."""
    out = grad.copy()
    for i, (lo, hi) in enumerate(bounds):
        if u[i] <= lo + tol and out[i] > 0:
            out[i] = 0.0
        if u[i] >= hi - tol and out[i] < 0:
            out[i] = 0.0
    return out


def _hessian_from_score(params: ModelParams, Z, ya, w):
    """Central-difference Hessian of the log-likelihood built on the analytic score."""
    theta = params.theta()
    k = params.k
    dim = k + 3
    H = np.zeros((dim, dim))

    def score_at(vec):
        p = ModelParams(beta=vec[:k], sigma2=vec[k], phi1=vec[k + 1], rho=vec[k + 2])
        return score(p, Z, ya, w)

    for i in range(dim):
        h = 1e-5 * max(1.0, abs(theta[i]))
        if i == k:  # sigma2 must stay positive
            h = min(h, 0.49 * theta[i])
        if i >= k + 1:  # keep phi1, rho inside (-1, 1)
            h = min(h, 0.5 * (1.0 - abs(theta[i])))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        H[i] = (score_at(up) - score_at(dn)) / (2.0 * h)
    return 0.5 * (H + H.T)


def fit(Z, ya, w, config: EstimationConfig | None = None) -> FitResult:
    """Estimate (beta, phi1, sigma2, rho) by multistart box-constrained quasi-Newton.

    Starts are spread over a coarse (rho, phi1) lattice with moment-based
    sigma2 initializations; the best local optimum wins, ties broken by start
    index. Gaussian standard errors come from the inverse observed information
    (numeric Hessian of the analytic score) and are omitted when that matrix
    is not positive definite.

    Raises :class:`ConvergenceError` carrying all traces when every start
    fails to produce a finite objective.
    """
    config = config or EstimationConfig()
    if not isinstance(w, SpatialWeights):
        w = SpatialWeights.from_matrix(np.asarray(w, dtype=float))
    n = w.n
    ya = np.asarray(ya, dtype=float)
    T = ya.shape[0]
    Z = check_design(Z, n, T)
    ya = check_aggregate(ya, T)
    k = Z.shape[1]

    condition_warnings = []
    if not w.row_standardized:
        condition_warnings.append("weight matrix rows are not standardized")
    if not w.column_sum_heterogeneous:
        condition_warnings.append(
            "weight matrix column sums are homogeneous; rho is not identifiable"
        )
    if T <= k + 3:
        condition_warnings.append(f"T={T} is small for {k + 3} parameters")
    ratio = column_scale_ratio(Z)
    if ratio > 1e6:
        condition_warnings.append(f"covariate columns badly scaled (norm ratio {ratio:.1e})")

    starts = _start_points(config)
    workers = min(len(starts), 4, os.cpu_count() or 1)
    if workers == 1:
        outcomes = [_run_start(i, s, Z, ya, w, config) for i, s in enumerate(starts)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_start, i, s, Z, ya, w, config) for i, s in enumerate(starts)
            ]
            outcomes = [f.result() for f in futures]

    traces = [t for _, t in outcomes]
    finite = [(res, t) for res, t in outcomes if np.isfinite(res.fun) and res.fun < PENALTY / 2]
    if not finite:
        raise ConvergenceError("no optimizer start reached a usable optimum", traces=traces)
    best_res, _ = min(finite, key=lambda pair: (pair[0].fun, pair[1]["start_index"]))

    rho_hat, phi_hat = best_res.x[0], best_res.x[1]
    sigma2_hat = math.exp(best_res.x[2])
    ctx = _Context(rho_hat, phi_hat, Z, ya, w)
    beta_hat = ctx.beta
    params = ModelParams(beta=beta_hat, phi1=phi_hat, sigma2=sigma2_hat, rho=rho_hat)

    full = ctx.score_blocks(sigma2_hat)
    grad_internal = np.array([-full[-1], -full[-2], -full[-3] * sigma2_hat])
    bounds = [config.rho_bounds, config.phi_bounds, (math.log(config.sigma2_min), 50.0)]
    proj = _projected_gradient(best_res.x, grad_internal, bounds)
    gradient_norm = float(np.max(np.abs(proj)))
    converged = gradient_norm <= config.grad_tol

    npen = sum(t["penalties"] for t in traces)
    if npen:
        condition_warnings.append(f"{npen} objective evaluations hit a non-finite covariance")
    rlo, rhi = config.rho_bounds
    plo, phi_hi = config.phi_bounds
    if abs(rho_hat) > BOUNDARY_RHO or min(rho_hat - rlo, rhi - rho_hat) < 1e-3:
        condition_warnings.append(f"rho estimate {rho_hat:.3f} is near the spatial boundary")
    if abs(phi_hat) > BOUNDARY_PHI or min(phi_hat - plo, phi_hi - phi_hat) < 1e-3:
        condition_warnings.append(f"phi1 estimate {phi_hat:.3f} is near the unit root boundary")

    std_errors = None
    param_cov = None
    try:
        H = _hessian_from_score(params, Z, ya, w)
        info = -H
        cov = np.linalg.inv(info)
        diag = np.diag(cov)
        if np.all(np.linalg.eigvalsh(info) > 0) and np.all(diag > 0):
            std_errors = np.sqrt(diag)
            param_cov = cov
        else:
            condition_warnings.append(
                "observed information not positive definite; standard errors unavailable"
            )
    except (np.linalg.LinAlgError, NearSingularError, CovarianceError, ValueError):
        condition_warnings.append("standard error computation failed")

    result = FitResult(
        params=params,
        loglik=-float(best_res.fun),
        std_errors=std_errors,
        gradient_norm=gradient_norm,
        converged=converged,
        condition_warnings=condition_warnings,
        optimizer_trace=traces,
        param_cov=param_cov,
    )
    logger.debug(
        "fit done: rho=%.4f phi1=%.4f sigma2=%.4g loglik=%.4f converged=%s",
        rho_hat,
        phi_hat,
        sigma2_hat,
        result.loglik,
        converged,
    )
    return result
