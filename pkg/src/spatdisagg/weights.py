"""Spatial weight matrices: grid contiguity, explicit adjacency, and Gower similarity.

All construction paths funnel through :func:`row_standardize`, so every
returned matrix has zero diagonal, nonnegative entries, and rows summing to
one. The column-sum heterogeneity flag records whether the identifiability
condition on W holds; a homogeneous matrix (for example a symmetric ring) is
allowed but leaves the spatial parameter unidentifiable.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import IsolatedRegionError, NoOverlapError

__all__ = [
    "SpatialWeights",
    "MixedRecord",
    "IdentifiabilityReport",
    "row_standardize",
    "build_grid_adjacency",
    "grid_adjacency_matrix",
    "gower_dissimilarity",
    "gower_weights",
    "validate_identifiability",
    "load_weights_matrix",
    "load_weights_edges",
    "save_weights_csv",
    "load_mixed_records_csv",
]

ROW_SUM_TOL = 1e-12
COLUMN_SUM_TOL = 1e-9


@dataclass(frozen=True)
class SpatialWeights:
    """An n x n nonnegative weight matrix with a zero diagonal.

    Attributes
    ----------
    w : ndarray
        The weight matrix.
    row_standardized : bool
        True when every row sums to one within ``ROW_SUM_TOL``.
    column_sum_heterogeneous : bool
        True when at least two column sums differ by more than
        ``COLUMN_SUM_TOL``; required for the spatial parameter to be
        identifiable.
    """

    w: np.ndarray
    row_standardized: bool = field(default=False)
    column_sum_heterogeneous: bool = field(default=False)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weight matrix must be square; got shape {w.shape}")
        if np.any(w < 0):
            raise ValueError("weight matrix entries must be nonnegative")
        if np.any(np.abs(np.diag(w)) > 0):
            raise ValueError("weight matrix diagonal must be zero")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "row_standardized", bool(self.row_standardized))
        object.__setattr__(self, "column_sum_heterogeneous", bool(self.column_sum_heterogeneous))

    @property
    def n(self):
        return self.w.shape[0]

    @classmethod
    def from_matrix(cls, w):
        """Wrap an existing matrix, computing the validity flags (no rescaling)."""
        w = np.asarray(w, dtype=float)
        row_ok = w.shape[0] > 0 and np.all(np.abs(w.sum(axis=1) - 1.0) <= ROW_SUM_TOL)
        col = w.sum(axis=0)
        hetero = bool(col.size > 1 and (col.max() - col.min()) > COLUMN_SUM_TOL)
        return cls(w=w, row_standardized=row_ok, column_sum_heterogeneous=hetero)


@dataclass(frozen=True)
class MixedRecord:
    """One region's mixed-type profile. ``None`` marks a missing value."""

    numeric: tuple = ()
    categorical: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "numeric", tuple(self.numeric))
        object.__setattr__(self, "categorical", tuple(self.categorical))


@dataclass(frozen=True)
class IdentifiabilityReport:
    """Outcome of the column-sum heterogeneity check."""

    passed: bool
    column_sums: np.ndarray
    spread: float
    message: str


def row_standardize(raw) -> SpatialWeights:
    """Divide each row of a nonnegative matrix by its sum.

    The diagonal is forced to zero before scaling. A row with no positive
    off-diagonal entry raises :class:`IsolatedRegionError` naming the
    offending index.
    """
    w = np.array(raw, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"weight matrix must be square; got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("weight matrix entries must be nonnegative")
    np.fill_diagonal(w, 0.0)
    sums = w.sum(axis=1)
    dead = np.flatnonzero(sums <= 0)
    if dead.size:
        raise IsolatedRegionError(int(dead[0]))
    w /= sums[:, None]
    return SpatialWeights.from_matrix(w)


def grid_adjacency_matrix(k: int) -> np.ndarray:
    """Raw 0/1 queen-contiguity adjacency of a k x k grid, row-major cell order."""
    if k < 2:
        raise ValueError("grid side k must be >= 2; a 1x1 grid has no neighbors")
    n = k * k
    rows = np.arange(n) // k
    cols = np.arange(n) % k
    dr = np.abs(rows[:, None] - rows[None, :])
    dc = np.abs(cols[:, None] - cols[None, :])
    adj = (np.maximum(dr, dc) == 1).astype(float)
    return adj


def build_grid_adjacency(k: int) -> SpatialWeights:
    """Row-standardized queen (8-neighbor) contiguity for a k x k grid."""
    return row_standardize(grid_adjacency_matrix(k))


def gower_dissimilarity(records) -> np.ndarray:
    """Pairwise Gower dissimilarities in [0, 1] for mixed-type records.

    Numeric contributions are |x_i - x_j| / range with ranges taken over the
    observed values; categorical contributions are 0/1 mismatch. All variables
    carry equal weight, and a variable missing in either record of a pair is
    excluded from that pair's average. A numeric variable whose observed range
    is zero contributes 0 and triggers a warning.
    """
    records = list(records)
    n = len(records)
    if n < 2:
        raise ValueError("need at least two records")
    p_num = len(records[0].numeric)
    p_cat = len(records[0].categorical)
    for r in records:
        if len(r.numeric) != p_num or len(r.categorical) != p_cat:
            raise ValueError("all records must have the same variables")

    num = np.full((n, p_num), np.nan)
    for i, r in enumerate(records):
        for v, x in enumerate(r.numeric):
            if x is not None:
                num[i, v] = float(x)

    ranges = np.zeros(p_num)
    for v in range(p_num):
        col = num[:, v]
        seen = col[np.isfinite(col)]
        if seen.size:
            ranges[v] = seen.max() - seen.min()
            if seen.size > 1 and ranges[v] == 0.0:
                warnings.warn(
                    f"numeric variable {v} has zero observed range; it contributes 0 to all distances",
                    UserWarning,
                    stacklevel=2,
                )

    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            total = 0.0
            count = 0
            for v in range(p_num):
                xi, xj = num[i, v], num[j, v]
                if np.isfinite(xi) and np.isfinite(xj):
                    count += 1
                    if ranges[v] > 0:
                        total += abs(xi - xj) / ranges[v]
            for v in range(p_cat):
                ci, cj = records[i].categorical[v], records[j].categorical[v]
                if ci is not None and cj is not None:
                    count += 1
                    total += 0.0 if ci == cj else 1.0
            if count == 0:
                raise NoOverlapError(f"records {i} and {j} share no observed variable")
            d[i, j] = d[j, i] = total / count
    return d


def gower_weights(records) -> SpatialWeights:
    """Row-standardized similarity weights s_ij = 1 - d_ij from Gower distances."""
    records = list(records)
    if len(records) < 3:
        raise ValueError("need at least three records to build a weight matrix")
    d = gower_dissimilarity(records)
    s = 1.0 - d
    np.fill_diagonal(s, 0.0)
    return row_standardize(s)


def validate_identifiability(weights: SpatialWeights) -> IdentifiabilityReport:
    """Check the column-sum heterogeneity condition on a standardized matrix.

    Failure is reported, not raised: estimation with a homogeneous matrix is
    still permitted, but the spatial parameter is absorbed into the regression
    coefficients and cannot be recovered.
    """
    col = weights.w.sum(axis=0)
    spread = float(col.max() - col.min()) if col.size else 0.0
    passed = spread > COLUMN_SUM_TOL
    if passed:
        msg = "column sums are heterogeneous; spatial parameter identifiable"
    else:
        msg = (
            "all column sums are equal: the spatial parameter is not identifiable "
            "from aggregated data and estimates of rho are meaningless"
        )
    return IdentifiabilityReport(passed=passed, column_sums=col, spread=spread, message=msg)


def load_weights_matrix(path) -> SpatialWeights:
    """Read a dense CSV weight matrix and row-standardize it."""
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    return row_standardize(raw)


def load_weights_edges(path, n=None) -> SpatialWeights:
    """Read a CSV edge list of 1-based ``i,j`` pairs (undirected) and standardize.

    ``n`` defaults to the largest index seen.
    """
    pairs = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                i, j = int(row[0]), int(row[1])
            except ValueError:
                continue  # header line
            if i < 1 or j < 1:
                raise ValueError(f"edge list indices are 1-based; got ({i}, {j})")
            pairs.append((i - 1, j - 1))
    if not pairs:
        raise ValueError(f"no edges found in {path}")
    largest = max(max(i, j) for i, j in pairs) + 1
    if n is not None and largest > n:
        raise ValueError(f"edge list references region {largest} but only {n} regions exist")
    size = n if n is not None else largest
    raw = np.zeros((size, size))
    for i, j in pairs:
        raw[i, j] = 1.0
        raw[j, i] = 1.0
    return row_standardize(raw)


def save_weights_csv(weights: SpatialWeights, path):
    """Write the dense matrix with 15 significant digits."""
    np.savetxt(path, weights.w, delimiter=",", fmt="%.15g")


def load_mixed_records_csv(path):
    """Read mixed-type regional indicators from a headed CSV.

    Column names must carry a ``num:`` or ``cat:`` prefix declaring their
    type; an optional unprefixed ``region`` column supplies labels. Empty
    fields are treated as missing.

    Returns ``(records, labels)``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    num_idx, cat_idx, label_idx = [], [], None
    for pos, name in enumerate(header):
        name = name.strip()
        if name.startswith("num:"):
            num_idx.append(pos)
        elif name.startswith("cat:"):
            cat_idx.append(pos)
        elif name.lower() == "region":
            label_idx = pos
        else:
            raise ValueError(
                f"column {name!r} lacks a num:/cat: type declaration (or rename it 'region')"
            )
    records, labels = [], []
    for r, row in enumerate(rows):
        numeric = []
        for pos in num_idx:
            cell = row[pos].strip() if pos < len(row) else ""
            numeric.append(float(cell) if cell else None)
        categorical = []
        for pos in cat_idx:
            cell = row[pos].strip() if pos < len(row) else ""
            categorical.append(cell if cell else None)
        records.append(MixedRecord(numeric=numeric, categorical=categorical))
        labels.append(row[label_idx].strip() if label_idx is not None else str(r + 1))
    return records, labels
