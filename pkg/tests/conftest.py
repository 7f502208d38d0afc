import numpy as np
import pytest

import spatdisagg as sd


@pytest.fixture
def grid3():
    return sd.build_grid_adjacency(3)


@pytest.fixture
def small_data():
    """A small simulated instance shared by estimator/predictor tests."""
    spec = sd.ScenarioSpec(k=2, T=8, rho=0.3, phi=0.4, beta0=1.0, beta1=2.0, sigma=0.5, seed=42)
    return sd.generate(spec)


def dense_panel_cov(params, w, T):
    """Brute-force Kronecker assembly of the stacked panel covariance."""
    n = w.n
    A = np.eye(n * T) - params.rho * np.kron(np.eye(T), w.w)
    Ainv = np.linalg.inv(A)
    return Ainv @ np.kron(sd.ar1_covariance(params.phi1, params.sigma2, T), np.eye(n)) @ Ainv.T


def dense_blup(params, Z, ya, w):
    """Conditional-Gaussian oracle E[Y | CY = ya] with dense matrices."""
    n, T = w.n, len(ya)
    B = dense_panel_cov(params, w, T)
    C = sd.build_aggregator(n, T).dense()
    Ainv = np.linalg.inv(np.eye(n * T) - params.rho * np.kron(np.eye(T), w.w))
    mu = Ainv @ (np.asarray(Z) @ params.beta)
    CBC = C @ B @ C.T
    yhat = mu + B @ C.T @ np.linalg.solve(CBC, ya - C @ mu)
    cond = B - B @ C.T @ np.linalg.solve(CBC, C @ B)
    return yhat, cond
