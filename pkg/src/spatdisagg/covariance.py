"""Covariance algebra for the spatially autocorrelated panel model.

The latent panel stacks region-fastest: entry ``t*n + i`` holds region ``i``
at period ``t`` (0-based). Under that convention every operator used here is
a Kronecker product of a T x T temporal matrix with an n x n spatial one, and

    Cov(Y) = SigmaU (x) S S'      with  S = (I_n - rho W)^{-1},

so the aggregated covariance collapses to ``scalar * SigmaU`` with
``scalar = 1' S S' 1``. The functions below exploit that structure instead of
forming n*T x n*T matrices; the dense forms exist for tests and are guarded
by a materialization cap.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import get_lapack_funcs, lu_factor, lu_solve

from .exceptions import NearSingularError, TooLargeError
from .validation import check_interval

__all__ = [
    "StackedPanel",
    "ModelParams",
    "SpatialFilter",
    "AggregationOperator",
    "CovarianceModel",
    "ar1_covariance",
    "ar1_covariance_dphi",
    "apply_inverse_filter",
    "build_aggregator",
    "panel_covariance",
    "aggregate_covariance",
    "build_covariance",
]

RCOND_MIN = 1e-12
DEFAULT_CAP = 5000


@dataclass(frozen=True)
class StackedPanel:
    """A length n*T vector stacked region-fastest, plus its (n, T) shape."""

    values: np.ndarray
    n: int
    T: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.shape[0] != self.n * self.T:
            raise ValueError(
                f"panel length {values.shape[0]} does not match n*T = {self.n * self.T}"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def from_matrix(cls, matrix):
        """Build from a (T, n) matrix whose row t is the period-t slice."""
        matrix = np.asarray(matrix, dtype=float)
        T, n = matrix.shape
        return cls(values=matrix.ravel(), n=n, T=T)

    def as_matrix(self) -> np.ndarray:
        """Return the (T, n) view: row t holds all regions at period t."""
        return self.values.reshape(self.T, self.n)

    def flat_index(self, region: int, time: int) -> int:
        if not (0 <= region < self.n and 0 <= time < self.T):
            raise IndexError(f"cell ({region}, {time}) outside {self.n} x {self.T} panel")
        return time * self.n + region

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class ModelParams:
    """theta = (beta, phi1, sigma2, rho) with the stationarity domains enforced."""

    beta: np.ndarray
    phi1: float
    sigma2: float
    rho: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "beta", beta)
        check_interval(self.phi1, -1.0, 1.0, "phi1")
        check_interval(self.rho, -1.0, 1.0, "rho")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive; got {self.sigma2}")
        object.__setattr__(self, "phi1", float(self.phi1))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def k(self):
        return self.beta.shape[0]

    def theta(self) -> np.ndarray:
        """Flat parameter vector in the order (beta, sigma2, phi1, rho)."""
        return np.concatenate([self.beta, [self.sigma2, self.phi1, self.rho]])


def ar1_covariance(phi1: float, sigma2: float, T: int) -> np.ndarray:
    """Stationary AR(1) covariance: entry (i, j) = sigma2 * phi1^|i-j| / (1 - phi1^2)."""
    check_interval(phi1, -1.0, 1.0, "phi1")
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive; got {sigma2}")
    if T < 1:
        raise ValueError("T must be >= 1")
    lags = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    return sigma2 * phi1**lags / (1.0 - phi1**2)


def ar1_covariance_dphi(phi1: float, sigma2: float, T: int) -> np.ndarray:
    """Closed-form derivative of :func:`ar1_covariance` with respect to phi1."""
    check_interval(phi1, -1.0, 1.0, "phi1")
    lags = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    denom = (1.0 - phi1**2) ** 2
    # d/dphi [phi^m / (1-phi^2)] = phi^(m-1) * (m (1-phi^2) + 2 phi^2) / (1-phi^2)^2,
    # with the m = 0 case reducing to 2 phi / (1-phi^2)^2.
    with np.errstate(divide="ignore", invalid="ignore"):
        powm1 = np.where(lags >= 1, phi1 ** np.maximum(lags - 1, 0), 0.0)
    deriv = powm1 * (lags * (1.0 - phi1**2) + 2.0 * phi1**2) / denom
    deriv[lags == 0] = 2.0 * phi1 / denom
    return sigma2 * deriv


class SpatialFilter:
    """LU factorization of (I_n - rho W), shared across all period slices.

    Raises :class:`NearSingularError` when the reciprocal condition number
    falls below 1e-12.
    """

    def __init__(self, w, rho: float):
        w = w.w if hasattr(w, "w") else np.asarray(w, dtype=float)
        check_interval(rho, -1.0, 1.0, "rho")
        self.n = w.shape[0]
        self.rho = float(rho)
        self.w = w
        a = np.eye(self.n) - rho * w
        self._lu, self._piv = lu_factor(a)
        (gecon,) = get_lapack_funcs(("gecon",), (a,))
        rcond, _ = gecon(self._lu, np.linalg.norm(a, 1), norm="1")
        self.rcond = float(rcond)
        if self.rcond < RCOND_MIN:
            raise NearSingularError(self.rcond)

    def solve(self, b, transpose=False):
        """Solve (I - rho W) x = b, or the transposed system."""
        return lu_solve((self._lu, self._piv), np.asarray(b, dtype=float), trans=1 if transpose else 0)

    def solve_panel(self, values, T: int):
        """Apply (I - rho W)^{-1} to each period slice of stacked data.

        ``values`` is (n*T,) or (n*T, m); the factorization is reused for all
        slices and columns via a single triangular solve.
        """
        values = np.asarray(values, dtype=float)
        single = values.ndim == 1
        cols = values.reshape(T, self.n, -1)  # (T, n, m)
        stacked = np.moveaxis(cols, 1, 0).reshape(self.n, -1)  # (n, T*m)
        solved = self.solve(stacked)
        out = np.moveaxis(solved.reshape(self.n, T, -1), 0, 1).reshape(T * self.n, -1)
        return out.ravel() if single else out

    def dense_inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.n))


def apply_inverse_filter(panel, rho: float, w):
    """Apply [I_T (x) (I_n - rho W)]^{-1} to a stacked panel or (n*T, m) matrix.

    Never forms the n*T x n*T inverse; one factorization of the n x n filter
    serves every slice.
    """
    if isinstance(panel, StackedPanel):
        filt = SpatialFilter(w, rho)
        if filt.n != panel.n:
            raise ValueError(f"weight matrix is {filt.n} x {filt.n} but panel has n = {panel.n}")
        return StackedPanel(values=filt.solve_panel(panel.values, panel.T), n=panel.n, T=panel.T)
    filt = SpatialFilter(w, rho)
    arr = np.asarray(panel, dtype=float)
    rows = arr.shape[0]
    if rows % filt.n:
        raise ValueError(f"row count {rows} is not a multiple of n = {filt.n}")
    return filt.solve_panel(arr, rows // filt.n)


class AggregationOperator:
    """The per-period summation operator, stored implicitly.

    Applying it to a stacked panel returns the T per-period totals; the
    adjoint spreads a length-T vector uniformly across regions.
    """

    def __init__(self, n: int, T: int):
        if n < 1 or T < 1:
            raise ValueError("n and T must be >= 1")
        self.n = n
        self.T = T

    def apply(self, values):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            return values.reshape(self.T, self.n).sum(axis=1)
        return values.reshape(self.T, self.n, -1).sum(axis=1)

    def adjoint(self, totals):
        totals = np.asarray(totals, dtype=float)
        return np.repeat(totals, self.n)

    def dense(self) -> np.ndarray:
        return np.kron(np.eye(self.T), np.ones((1, self.n)))


def build_aggregator(n: int, T: int) -> AggregationOperator:
    return AggregationOperator(n, T)


@dataclass
class CovarianceModel:
    """All reusable covariance pieces for one (params, W, T) triple.

    ``smoothing`` is the n-vector g = S S' 1 and ``scalar`` = 1' S S' 1, the
    quantities through which aggregation interacts with the spatial filter.
    The dense panel covariance materializes lazily and only below ``cap``.
    """

    params: ModelParams
    T: int
    filter: SpatialFilter
    sigma_u: np.ndarray
    smoothing: np.ndarray
    scalar: float
    agg_cov: np.ndarray
    cap: int = DEFAULT_CAP
    _dense: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self):
        return self.filter.n

    def spatial_gram(self) -> np.ndarray:
        """S S' for the n x n filter inverse S."""
        s = self.filter.dense_inverse()
        return s @ s.T

    def panel_cov(self) -> np.ndarray:
        """Dense n*T x n*T covariance SigmaU (x) S S', subject to the cap."""
        size = self.n * self.T
        if size > self.cap:
            raise TooLargeError(
                f"panel covariance is {size} x {size}, above the cap of {self.cap}; "
                "use the structure-exploiting paths instead"
            )
        if self._dense is None:
            self._dense = np.kron(self.sigma_u, self.spatial_gram())
        return self._dense


def build_covariance(params: ModelParams, w, T: int, cap: int = DEFAULT_CAP) -> CovarianceModel:
    """Factor the spatial filter once and assemble every covariance ingredient."""
    filt = SpatialFilter(w, params.rho)
    ones = np.ones(filt.n)
    h = filt.solve(ones, transpose=True)  # S' 1
    g = filt.solve(h)  # S S' 1
    scalar = float(h @ h)
    sigma = ar1_covariance(params.phi1, params.sigma2, T)
    return CovarianceModel(
        params=params,
        T=T,
        filter=filt,
        sigma_u=sigma,
        smoothing=g,
        scalar=scalar,
        agg_cov=scalar * sigma,
        cap=cap,
    )


def panel_covariance(params: ModelParams, w, T: int, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Dense covariance of the stacked panel (tests and small problems only)."""
    return build_covariance(params, w, T, cap=cap).panel_cov()


def aggregate_covariance(params: ModelParams, w, T: int) -> np.ndarray:
    """T x T covariance of the aggregate series: (1' S S' 1) * SigmaU."""
    return build_covariance(params, w, T).agg_cov
