"""Poisson observation model with log link, offsets, and the latent-field
log-posterior kernel used by the Laplace machinery."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln

from .covariance import CholFactor, StackedInputs

__all__ = [
    "Dataset",
    "RegressionCoefficients",
    "poisson_logpmf",
    "phi",
    "phi_grad_W",
]


@dataclass(frozen=True)
class Dataset:
    """Two-component count data.

    Per component a: counts ``z_a`` (nonnegative integers), mean
    covariates ``U_a`` (n_a x q_a, first column conventionally the
    intercept), covariance inputs ``x_a`` (n_a x p), and positive
    exposures ``E_a`` (defaults to all ones).  Components need not be
    observed in pairs and may have different sizes.
    """

    z1: np.ndarray
    U1: np.ndarray
    x1: np.ndarray
    z2: np.ndarray
    U2: np.ndarray
    x2: np.ndarray
    E1: np.ndarray | None = None
    E2: np.ndarray | None = None

    def __post_init__(self):
        for a in (1, 2):
            z = np.asarray(getattr(self, f"z{a}"), dtype=float)
            U = np.atleast_2d(np.asarray(getattr(self, f"U{a}"), dtype=float))
            x = getattr(self, f"x{a}")
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            n = z.shape[0]
            if n < 1:
                raise ValueError(f"component {a} is empty")
            if np.any(z < 0) or np.any(z != np.floor(z)) or not np.all(np.isfinite(z)):
                raise ValueError(f"component {a} counts must be nonnegative integers")
            if U.shape[0] != n or x.shape[0] != n:
                raise ValueError(
                    f"component {a} row counts disagree: "
                    f"z has {n}, U has {U.shape[0]}, x has {x.shape[0]}"
                )
            E = getattr(self, f"E{a}")
            E = np.ones(n) if E is None else np.asarray(E, dtype=float)
            if E.shape[0] != n or np.any(E <= 0) or not np.all(np.isfinite(E)):
                raise ValueError(f"component {a} exposures must be positive")
            for name, val in ((f"z{a}", z.astype(np.int64)), (f"U{a}", U), (f"x{a}", x), (f"E{a}", E)):
                val = np.ascontiguousarray(val)
                val.setflags(write=False)
                object.__setattr__(self, name, val)
        if self.x1.shape[1] != self.x2.shape[1]:
            raise ValueError("covariance input dimensions differ between components")

    @property
    def n1(self) -> int:
        return self.z1.shape[0]

    @property
    def n2(self) -> int:
        return self.z2.shape[0]

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    @property
    def inputs(self) -> StackedInputs:
        return StackedInputs(self.x1, self.x2)

    @property
    def counts(self) -> np.ndarray:
        """Stacked counts (component 1 first)."""
        return np.concatenate([self.z1, self.z2]).astype(float)

    @property
    def log_exposure(self) -> np.ndarray:
        return np.concatenate([np.log(self.E1), np.log(self.E2)])

    def linear_predictor(self, beta: "RegressionCoefficients") -> np.ndarray:
        """Stacked U_a' beta_a, without offsets."""
        return np.concatenate([self.U1 @ beta.b1, self.U2 @ beta.b2])


@dataclass(frozen=True)
class RegressionCoefficients:
    """Mean-model coefficients (b1, b2), one vector per component."""

    b1: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("b1", "b2"):
            b = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(b)):
                raise ValueError(f"{name} must be finite")
            b.setflags(write=False)
            object.__setattr__(self, name, b)

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.b1, self.b2])


def poisson_logpmf(z, eta, logE=0.0):
    """log p(z) for z ~ Poisson(E * exp(eta)), elementwise.

    log z! goes through log-gamma, so large counts do not overflow.
    When the mean itself overflows the result is -inf.
    """
    z = np.asarray(z, dtype=float)
    loglam = np.asarray(eta, dtype=float) + np.asarray(logE, dtype=float)
    with np.errstate(over="ignore"):
        mu = np.exp(loglam)
    out = z * loglam - mu - gammaln(z + 1.0)
    if out.ndim == 0:
        return float(out)
    return out


def _loglik_terms(tau, data: Dataset, beta: RegressionCoefficients) -> np.ndarray:
    eta = data.linear_predictor(beta) + tau
    return poisson_logpmf(data.counts, eta, data.log_exposure)


def phi(tau, data: Dataset, beta: RegressionCoefficients, kfactor: CholFactor) -> float:
    """Joint log-density kernel of (z, tau):

    -log|K|/2 - tau' K^{-1} tau / 2 - (n/2) log(2 pi) + sum log p(z | tau).

    Strictly concave in tau: the Hessian is -(diag(mu) + K^{-1}).
    """
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (data.n,):
        raise ValueError(f"tau must have length {data.n}, got {tau.shape}")
    half = solve_triangular(kfactor.L, tau, lower=True)
    quad = float(half @ half)
    ll = float(np.sum(_loglik_terms(tau, data, beta)))
    return -0.5 * kfactor.logdet - 0.5 * quad - 0.5 * data.n * math.log(2.0 * math.pi) + ll


def phi_grad_W(tau, data: Dataset, beta: RegressionCoefficients, kfactor: CholFactor):
    """Gradient of phi and the diagonal W of the likelihood curvature.

    grad = (z - mu) - K^{-1} tau, W = mu with
    mu_i = E_i exp(U_i' beta + tau_i).
    """
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (data.n,):
        raise ValueError(f"tau must have length {data.n}, got {tau.shape}")
    eta = data.linear_predictor(beta) + tau + data.log_exposure
    mu = np.exp(eta)
    grad = (data.counts - mu) - cho_solve((kfactor.L, True), tau)
    return grad, mu
