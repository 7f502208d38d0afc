"""Spatial disaggregation of aggregate time series.

Reconstructs n unobserved regional series from an observed total using a
spatial autoregressive panel with AR(1) errors, exact benchmarking to the
aggregate, optional anchoring of known cells, and covariates, plus a
simulation harness that validates the estimator against synthetic truth.
"""

from .covariance import (
    AggregationOperator,
    CovarianceModel,
    ModelParams,
    StackedPanel,
    aggregate_covariance,
    apply_inverse_filter,
    ar1_covariance,
    ar1_covariance_dphi,
    build_aggregator,
    build_covariance,
    panel_covariance,
)
from .dataprep import (
    CorrelationPCA,
    PanelDataset,
    PanelImputer,
    PcaModel,
    impute_linear,
    impute_panel,
    load_panel_csv,
    pca_fit,
    pca_transform,
    select_components,
)
from .diagnostics import MetricReport, TheoreticalSummary, empirical_metrics, theoretical_summary
from .disaggregator import SpatialDisaggregator
from .estimator import (
    EstimationConfig,
    FitResult,
    concentrated_negloglik,
    fit,
    gls_beta,
    loglik,
    score,
)
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
    SpatialDisaggError,
    TooLargeError,
    UndefinedMetricError,
    ZeroVarianceError,
)
from .predictor import (
    ConstraintSystem,
    DisaggregationResult,
    anchored_blup,
    blup,
    pointwise_intervals,
    save_disaggregation_csv,
)
from .simulation import (
    RunRecord,
    ScenarioSpec,
    SimulatedData,
    SweepSummary,
    generate,
    load_sweep_config,
    ratio_category,
    run_scenario,
    sweep,
)
from .weights import (
    IdentifiabilityReport,
    MixedRecord,
    SpatialWeights,
    build_grid_adjacency,
    gower_dissimilarity,
    gower_weights,
    grid_adjacency_matrix,
    load_mixed_records_csv,
    load_weights_edges,
    load_weights_matrix,
    row_standardize,
    save_weights_csv,
    validate_identifiability,
)

__version__ = "0.1.0"
