"""Input validation helpers used by the public estimator surfaces."""

import numpy as np

__all__ = [
    "as_float_array",
    "check_design",
    "check_aggregate",
    "check_interval",
    "column_scale_ratio",
]


def as_float_array(a, name="array", ndim=None):
    """Convert to a float ndarray and reject non-finite entries."""
    arr = np.asarray(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_design(Z, n, T, name="Z"):
    """Validate a stacked covariate matrix of shape (n*T, k)."""
    Z = as_float_array(Z, name)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[0] != n * T:
        raise ValueError(f"{name} must have shape ({n * T}, k); got {Z.shape}")
    return Z


def check_aggregate(ya, T, name="Ya"):
    """Validate the observed aggregate series of length T."""
    ya = as_float_array(ya, name, ndim=1)
    if ya.shape[0] != T:
        raise ValueError(f"{name} must have length {T}; got {ya.shape[0]}")
    return ya


def check_interval(value, lo, hi, name):
    """Require lo < value < hi (open interval)."""
    if not (lo < value < hi):
        raise ValueError(f"{name} must lie in the open interval ({lo}, {hi}); got {value}")
    return float(value)


def column_scale_ratio(Z):
    """Ratio of largest to smallest nonzero column norm, used to flag bad scaling."""
    norms = np.linalg.norm(Z, axis=0)
    nz = norms[norms > 0]
    if nz.size == 0:
        return np.inf
    return float(nz.max() / nz.min())
