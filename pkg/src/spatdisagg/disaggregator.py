"""Scikit-learn style front-end: fit on the aggregate, predict the panel."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .estimator import EstimationConfig, fit as fit_params
from .predictor import anchored_blup, blup
from .weights import SpatialWeights, row_standardize

__all__ = ["SpatialDisaggregator"]


class SpatialDisaggregator(BaseEstimator):
    """Disaggregate an observed aggregate series into regional components.

    ``fit(Z, y)`` estimates the spatial-autoregressive panel parameters from
    the aggregate series ``y`` (length T) and the stacked covariates ``Z``
    (shape ``(n*T, k)``, region-fastest); ``predict`` returns the constrained
    best linear unbiased prediction of the latent panel, which sums to ``y``
    in every period.

    Parameters
    ----------
    weights : SpatialWeights or array-like
        Spatial weight matrix. Raw arrays are row-standardized.
    rho_bounds, phi_bounds : tuple
        Open box constraints for the spatial and temporal parameters.
    sigma2_min : float
        Lower bound for the innovation variance.
    multistart : int
        Number of optimizer starting points.
    max_iter : int
        Iteration cap per start.
    grad_tol : float
        Projected-gradient tolerance defining convergence.
    seed : int
        Seed for any randomized starting points.

    Attributes
    ----------
    result_ : FitResult
        Full estimation output (parameters, standard errors, trace).
    params_ : ModelParams
        The estimated parameter vector.
    """

    def __init__(
        self,
        weights=None,
        rho_bounds=(-0.99, 0.99),
        phi_bounds=(-0.99, 0.99),
        sigma2_min=1e-8,
        multistart=5,
        max_iter=200,
        grad_tol=1e-4,
        seed=0,
    ):
        self.weights = weights
        self.rho_bounds = rho_bounds
        self.phi_bounds = phi_bounds
        self.sigma2_min = sigma2_min
        self.multistart = multistart
        self.max_iter = max_iter
        self.grad_tol = grad_tol
        self.seed = seed

    def _resolved_weights(self) -> SpatialWeights:
        if self.weights is None:
            raise ValueError("weights must be provided before fitting")
        if isinstance(self.weights, SpatialWeights):
            return self.weights
        return row_standardize(np.asarray(self.weights, dtype=float))

    def _config(self) -> EstimationConfig:
        return EstimationConfig(
            rho_bounds=tuple(self.rho_bounds),
            phi_bounds=tuple(self.phi_bounds),
            sigma2_min=self.sigma2_min,
            multistart=self.multistart,
            max_iter=self.max_iter,
            grad_tol=self.grad_tol,
            seed=self.seed,
        )

    def fit(self, Z, y):
        """Estimate the model from covariates Z and the aggregate series y."""
        w = self._resolved_weights()
        y = np.asarray(y, dtype=float)
        Z = np.asarray(Z, dtype=float)
        self.result_ = fit_params(Z, y, w, self._config())
        self.params_ = self.result_.params
        self.weights_ = w
        self.Z_ = Z
        self.y_ = y
        self.n_features_in_ = Z.shape[1] if Z.ndim == 2 else 1
        return self

    def disaggregate(self, Z=None, y=None, anchors=None, mean_uncertainty=False):
        """Full disaggregation result (values, variances, coherence evidence)."""
        check_is_fitted(self, "result_")
        Z = self.Z_ if Z is None else np.asarray(Z, dtype=float)
        y = self.y_ if y is None else np.asarray(y, dtype=float)
        kwargs = {}
        if mean_uncertainty:
            kwargs = {"param_cov": self.result_.param_cov, "mean_uncertainty": True}
        if anchors:
            return anchored_blup(self.params_, Z, y, anchors, self.weights_, **kwargs)
        return blup(self.params_, Z, y, self.weights_, **kwargs)

    def predict(self, Z=None, y=None, anchors=None):
        """Disaggregated panel values as a flat region-fastest array."""
        return self.disaggregate(Z=Z, y=y, anchors=anchors).yhat.values
