"""Application data pipeline: panel ingestion, imputation, standardization, PCA.

Each time series is imputed independently (linear interpolation over time,
flat extension at the edges) so no information leaks across regions or
variables. PCA works on the sample correlation matrix of the pooled,
standardized covariates with a deterministic sign convention.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InsufficientDataError, ZeroVarianceError

__all__ = [
    "PanelDataset",
    "PcaModel",
    "impute_linear",
    "impute_panel",
    "standardize_columns",
    "pca_fit",
    "pca_transform",
    "select_components",
    "load_panel_csv",
    "PanelImputer",
    "CorrelationPCA",
]


def impute_linear(series, name="series"):
    """Fill gaps in one time series: linear inside, nearest value at the edges.

    Returns ``(filled, imputed_mask)``. Requires at least two observed points.
    """
    values = np.asarray(series, dtype=float)
    observed = np.isfinite(values)
    if observed.sum() < 2:
        raise InsufficientDataError(f"{name} has {int(observed.sum())} observed points; need at least 2")
    idx = np.arange(values.shape[0])
    filled = np.interp(idx, idx[observed], values[observed])
    return filled, ~observed


def standardize_columns(X):
    """Center and scale by the sample standard deviation (ddof=1).

    Returns ``(standardized, means, sds)``; a constant column raises
    :class:`ZeroVarianceError`.
    """
    X = np.asarray(X, dtype=float)
    means = X.mean(axis=0)
    sds = X.std(axis=0, ddof=1)
    dead = np.flatnonzero(sds == 0)
    if dead.size:
        raise ZeroVarianceError(f"columns {dead.tolist()} are constant; cannot standardize")
    return (X - means) / sds, means, sds


@dataclass(frozen=True)
class PcaModel:
    """Correlation-matrix PCA: scalers, orthonormal loadings, explained shares."""

    means: np.ndarray
    sds: np.ndarray
    loadings: np.ndarray  # (k, k), columns ordered by decreasing eigenvalue
    explained_variance_pct: np.ndarray
    n_components_selected: int

    @property
    def k(self):
        return self.loadings.shape[0]

    def to_json(self, **kwargs):
        payload = {
            "means": self.means.tolist(),
            "sds": self.sds.tolist(),
            "loadings": self.loadings.tolist(),
            "explained_variance_pct": self.explained_variance_pct.tolist(),
            "n_components_selected": self.n_components_selected,
        }
        return json.dumps(payload, **kwargs)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        return cls(
            means=np.asarray(payload["means"], dtype=float),
            sds=np.asarray(payload["sds"], dtype=float),
            loadings=np.asarray(payload["loadings"], dtype=float),
            explained_variance_pct=np.asarray(payload["explained_variance_pct"], dtype=float),
            n_components_selected=int(payload["n_components_selected"]),
        )


def pca_fit(X, threshold_pct: float = 95.0) -> PcaModel:
    """Eigendecompose the sample correlation matrix of the covariate block.

    Components are ordered by decreasing eigenvalue. The sign of each loading
    column is fixed by forcing its largest-magnitude entry positive, which
    makes results deterministic; downstream regressions absorb any flip.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError(f"need a 2-d covariate block with k >= 2 columns; got shape {X.shape}")
    Xs, means, sds = standardize_columns(X)
    N, k = Xs.shape
    corr = Xs.T @ Xs / (N - 1)
    evals, evecs = np.linalg.eigh(corr)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    for j in range(k):
        lead = np.argmax(np.abs(evecs[:, j]))
        if evecs[lead, j] < 0:
            evecs[:, j] = -evecs[:, j]
    explained = evals / evals.sum() * 100.0
    m = select_components(explained, threshold_pct)
    return PcaModel(
        means=means,
        sds=sds,
        loadings=evecs,
        explained_variance_pct=explained,
        n_components_selected=m,
    )


def pca_transform(model: PcaModel, X) -> np.ndarray:
    """Standardize with the fitted scalers and project on the selected components.

    On the fitting data the per-component sample variance (ddof=1) equals the
    corresponding eigenvalue.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.k:
        raise ValueError(f"X has {X.shape[1] if X.ndim == 2 else '?'} columns; model expects {model.k}")
    Xs = (X - model.means) / model.sds
    return Xs @ model.loadings[:, : model.n_components_selected]


def select_components(model_or_pct, threshold_pct: float = 95.0) -> int:
    """Smallest component count whose cumulative explained share meets the threshold."""
    if not 0.0 < threshold_pct <= 100.0:
        raise ValueError(f"threshold_pct must be in (0, 100]; got {threshold_pct}")
    pct = (
        model_or_pct.explained_variance_pct
        if isinstance(model_or_pct, PcaModel)
        else np.asarray(model_or_pct, dtype=float)
    )
    cum = np.cumsum(pct)
    hits = np.flatnonzero(cum >= threshold_pct - 1e-12)
    return int(hits[0]) + 1 if hits.size else pct.shape[0]


@dataclass
class PanelDataset:
    """A fully indexed region x period panel with its aggregate and anchors.

    Covariates stack region-fastest (period-major), matching the estimator's
    convention; anchors are (region_index, period_index, value) triples.
    """

    regions: list
    periods: list
    variables: list
    covariates: np.ndarray  # (n*T, k)
    aggregate: np.ndarray  # (T,)
    anchors: list = field(default_factory=list)
    imputed: np.ndarray | None = None

    @property
    def n(self):
        return len(self.regions)

    @property
    def T(self):
        return len(self.periods)

    @property
    def k(self):
        return len(self.variables)


def _sorted_labels(values):
    labels = list(dict.fromkeys(values))
    try:
        return sorted(labels, key=float)
    except (TypeError, ValueError):
        return sorted(labels, key=str)


def load_panel_csv(covariates_path, aggregate_path, anchors_path=None) -> PanelDataset:
    """Assemble a :class:`PanelDataset` from long-format CSV files.

    ``covariates_path``: columns region, period, variable, value.
    ``aggregate_path``: columns period, total; defines the period axis.
    ``anchors_path``: optional columns region, period, value.
    Unobserved cells become NaN for later imputation.
    """
    cov = pd.read_csv(covariates_path, dtype={"region": str, "period": str, "variable": str})
    for col in ("region", "period", "variable", "value"):
        if col not in cov.columns:
            raise ValueError(f"{covariates_path}: missing column {col!r}")
    agg = pd.read_csv(aggregate_path, dtype={"period": str})
    for col in ("period", "total"):
        if col not in agg.columns:
            raise ValueError(f"{aggregate_path}: missing column {col!r}")

    periods = _sorted_labels(agg["period"])
    extra = set(cov["period"]) - set(periods)
    if extra:
        raise ValueError(f"covariate periods {sorted(extra)} are absent from the aggregate file")
    regions = _sorted_labels(cov["region"])
    variables = _sorted_labels(cov["variable"])

    agg_map = dict(zip(agg["period"], agg["total"].astype(float)))
    aggregate = np.array([agg_map[p] for p in periods])

    ridx = {r: i for i, r in enumerate(regions)}
    pidx = {p: i for i, p in enumerate(periods)}
    vidx = {v: i for i, v in enumerate(variables)}
    n, T, k = len(regions), len(periods), len(variables)
    X = np.full((n * T, k), np.nan)
    for region, period, variable, value in cov[["region", "period", "variable", "value"]].itertuples(index=False):
        X[pidx[period] * n + ridx[region], vidx[variable]] = float(value)

    anchors = []
    if anchors_path is not None:
        anc = pd.read_csv(anchors_path, dtype={"region": str, "period": str})
        for col in ("region", "period", "value"):
            if col not in anc.columns:
                raise ValueError(f"{anchors_path}: missing column {col!r}")
        for region, period, value in anc[["region", "period", "value"]].itertuples(index=False):
            if region not in ridx or period not in pidx:
                raise ValueError(f"anchor ({region}, {period}) not present in the panel index")
            anchors.append((ridx[region], pidx[period], float(value)))

    return PanelDataset(
        regions=regions,
        periods=periods,
        variables=variables,
        covariates=X,
        aggregate=aggregate,
        anchors=anchors,
    )


def impute_panel(dataset: PanelDataset) -> PanelDataset:
    """Impute every (region, variable) series independently over time."""
    n, T, k = dataset.n, dataset.T, dataset.k
    X = dataset.covariates.copy()
    mask = np.zeros_like(X, dtype=bool)
    for v in range(k):
        for i in range(n):
            series = X[i::n, v]
            if np.all(np.isfinite(series)):
                continue
            filled, imp = impute_linear(
                series, name=f"region {dataset.regions[i]!r}, variable {dataset.variables[v]!r}"
            )
            X[i::n, v] = filled
            mask[i::n, v] = imp
    return PanelDataset(
        regions=dataset.regions,
        periods=dataset.periods,
        variables=dataset.variables,
        covariates=X,
        aggregate=dataset.aggregate,
        anchors=list(dataset.anchors),
        imputed=mask,
    )


class PanelImputer(TransformerMixin, BaseEstimator):
    """Per-series linear-in-time imputer for stacked panels (stateless).

    Expects X of shape (n_regions * T, k) stacked region-fastest; series i of
    variable v occupies rows i, i+n, i+2n, ...
    """

    def __init__(self, n_regions=None):
        self.n_regions = n_regions

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if self.n_regions is None or self.n_regions < 1:
            raise ValueError("n_regions must be a positive integer")
        if X.shape[0] % self.n_regions:
            raise ValueError(
                f"row count {X.shape[0]} is not a multiple of n_regions = {self.n_regions}"
            )
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else 1
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = self.n_regions
        out = X.copy()
        for v in range(X.shape[1]):
            for i in range(n):
                series = out[i::n, v]
                if np.all(np.isfinite(series)):
                    continue
                out[i::n, v], _ = impute_linear(series, name=f"region {i}, column {v}")
        return out


class CorrelationPCA(TransformerMixin, BaseEstimator):
    """Correlation-matrix PCA transformer with threshold-based truncation."""

    def __init__(self, threshold_pct=95.0, n_components=None):
        self.threshold_pct = threshold_pct
        self.n_components = n_components

    def fit(self, X, y=None):
        model = pca_fit(X, threshold_pct=self.threshold_pct)
        if self.n_components is not None:
            if not 1 <= self.n_components <= model.k:
                raise ValueError(f"n_components must be in [1, {model.k}]")
            model = PcaModel(
                means=model.means,
                sds=model.sds,
                loadings=model.loadings,
                explained_variance_pct=model.explained_variance_pct,
                n_components_selected=int(self.n_components),
            )
        self.model_ = model
        self.explained_variance_pct_ = model.explained_variance_pct
        self.n_components_ = model.n_components_selected
        self.n_features_in_ = model.k
        return self

    def transform(self, X):
        if not hasattr(self, "model_"):
            raise RuntimeError("CorrelationPCA instance is not fitted yet")
        return pca_transform(self.model_, X)
