"""Covariance kernels for convolved-Gaussian-process latent fields.

A latent process is built by convolving a Gaussian smoothing kernel
``h(x) = v * exp(-x' A x / 2)`` with white noise.  The induced
self-covariance is

    k(d) = pi^(p/2) v^2 |A|^(-1/2) exp(-d' A d / 4),

and two processes driven by the *same* white noise through kernels
(v_a, A_a) and (v_b, A_b) have cross-covariance

    k_ab(d) = (2 pi)^(p/2) v_a v_b |A_a + A_b|^(-1/2) S(sqrt(Q_ab(d))),

with the quadratic form ``Q_ab(d) = d' A_a (A_a + A_b)^(-1) A_b d`` and,
for the Gaussian kernel, ``S(m) = exp(-m^2 / 2)``.  The same construction
stays positive definite when S is replaced by any isotropic correlation
function valid on R^p for every p, which is how the Matern,
gamma-exponential and rational-quadratic families are supported here.

All families share the squared-exponential normalisation at zero lag,
``k(0) = pi^(p/2) v^2 |A|^(-1/2)``, so amplitude parameters are
comparable across families.  Distances enter through ``sqrt(Q_aa(d)) =
sqrt(d' A d / 2)``; with that convention the gamma-exponential family is
continuous in the squared-exponential limit (exponent -> 2) and the
identical-kernel reduction ``k_ab(d; q, q) = k_aa(d; q)`` holds for
every family, not just the Gaussian one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gamma as gamma_fn
from scipy.special import kv

__all__ = [
    "CovFamily",
    "KernelParams",
    "quad_form",
    "cov_self_sqexp",
    "cov_cross_sqexp",
    "cov_iso",
    "cov_cross_general",
    "cov_cross_family",
    "iso_gram",
    "cross_gram",
]

DEFAULT_MATERN_NU = 1.5
DEFAULT_GAMMA_EXPONENT = 1.5
DEFAULT_RQ_ALPHA = 1.0

_SYM_RTOL = 1e-12


class CovFamily(Enum):
    """Supported stationary covariance families."""

    SQUARED_EXPONENTIAL = "sqexp"
    MATERN = "matern"
    GAMMA_EXPONENTIAL = "gamma_exp"
    RATIONAL_QUADRATIC = "rational_quadratic"


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of one smoothing kernel.

    Parameters
    ----------
    v : float
        Amplitude of the smoothing kernel.  Enters covariances as v^2
        (self terms) or v_a * v_b (cross terms).
    A : array_like
        p x p symmetric positive-definite precision matrix of the
        kernel (inverse squared length-scale units).  Scalars and 1-d
        arrays are promoted to (diagonal) matrices.
    nu : float, optional
        Matern smoothness, > 0.  Defaults to 1.5 when the Matern family
        is evaluated without an explicit value.
    gamma : float, optional
        Gamma-exponential exponent in (0, 2].  Defaults to 1.5.
    alpha : float, optional
        Rational-quadratic shape, > 0.  Defaults to 1.0.
    """

    v: float
    A: np.ndarray
    nu: float | None = None
    gamma: float | None = None
    alpha: float | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            if A.shape[0] == 1 and A.ndim == 2 and A.shape[1] > 1:
                A = np.diag(A.ravel())
            else:
                raise ValueError(f"A must be square, got shape {A.shape}")
        scale = np.max(np.abs(A))
        if scale == 0.0 or np.max(np.abs(A - A.T)) > _SYM_RTOL * scale:
            raise ValueError("A must be symmetric positive definite")
        A = 0.5 * (A + A.T)
        if np.min(np.linalg.eigvalsh(A)) <= 0.0:
            raise ValueError("A must have strictly positive eigenvalues")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "v", float(self.v))
        if self.nu is not None and not self.nu > 0.0:
            raise ValueError("Matern smoothness nu must be > 0")
        if self.gamma is not None and not 0.0 < self.gamma <= 2.0:
            raise ValueError("gamma exponent must lie in (0, 2]")
        if self.alpha is not None and not self.alpha > 0.0:
            raise ValueError("rational-quadratic alpha must be > 0")

    @property
    def dim(self) -> int:
        return self.A.shape[0]


def _as_spd_matrix(A, name: str) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    return A


def _corr(
    family: CovFamily,
    m: np.ndarray,
    nu: float | None = None,
    gamma: float | None = None,
    alpha: float | None = None,
) -> np.ndarray:
    """Isotropic correlation S(m) of `family`, with S(0) = 1."""
    m = np.asarray(m, dtype=float)
    if family is CovFamily.SQUARED_EXPONENTIAL:
        return np.exp(-0.5 * m * m)
    if family is CovFamily.GAMMA_EXPONENTIAL:
        g = gamma if gamma is not None else DEFAULT_GAMMA_EXPONENT
        return np.exp(-((m / math.sqrt(2.0)) ** g))
    if family is CovFamily.RATIONAL_QUADRATIC:
        a = alpha if alpha is not None else DEFAULT_RQ_ALPHA
        return (1.0 + m * m / (2.0 * a)) ** (-a)
    if family is CovFamily.MATERN:
        n = nu if nu is not None else DEFAULT_MATERN_NU
        return _matern_corr(m, n)
    raise ValueError(f"unknown covariance family: {family}")


def _merged_shape(pa: KernelParams, pb: KernelParams) -> dict:
    """Single shape-parameter set for a shared-family pair.

    The shared correlation is one function, so the pair must agree on
    any shape parameter both of them specify.
    """
    out = {}
    for field in ("nu", "gamma", "alpha"):
        va, vb = getattr(pa, field), getattr(pb, field)
        if va is not None and vb is not None and va != vb:
            raise ValueError(
                f"shared-family kernels disagree on {field}: {va} vs {vb}"
            )
        out[field] = va if va is not None else vb
    return out


def _matern_corr(m: np.ndarray, nu: float) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    scalar = m.ndim == 0
    m = np.atleast_1d(m)
    out = np.ones_like(m)
    pos = m > 1e-12
    t = math.sqrt(2.0 * nu) * m[pos]
    with np.errstate(over="ignore", invalid="ignore"):
        val = (2.0 ** (1.0 - nu) / gamma_fn(nu)) * t**nu * kv(nu, t)
    # kv underflows to 0 for large t; the limit of the product is 0
    out[pos] = np.where(np.isfinite(val), val, 0.0)
    return out[0] if scalar else out


def _chol_quad(cho, s: np.ndarray) -> np.ndarray:
    """Row-wise s_i' C^{-1} s_i for s of shape (m, p)."""
    y = cho_solve(cho, s.T)
    return np.einsum("ij,ji->i", s, y)


def quad_form(d, Aa, Ab) -> float | np.ndarray:
    """Quadratic form Q_ab(d) = d' A_a (A_a + A_b)^(-1) A_b d.

    `d` may be a single p-vector or an array of shape (..., p).  The
    result is nonnegative and invariant, bit for bit, under the joint
    swap (A_a, A_b, d) -> (A_b, A_a, -d); the evaluation goes through
    the polarisation identity

        Q = [ (u+w)' C^{-1} (u+w) - (u-w)' C^{-1} (u-w) ] / 4,

    u = A_a d, w = A_b d, C = A_a + A_b, whose terms are symmetric under
    that swap.

    Raises
    ------
    ValueError
        On dimension mismatch.
    numpy.linalg.LinAlgError
        If A_a + A_b is not positive definite.
    """
    Aa = _as_spd_matrix(Aa, "Aa")
    Ab = _as_spd_matrix(Ab, "Ab")
    d = np.asarray(d, dtype=float)
    scalar = d.ndim <= 1
    d2 = np.atleast_2d(d)
    p = Aa.shape[0]
    if Ab.shape[0] != p or d2.shape[-1] != p:
        raise ValueError(
            f"dimension mismatch: Aa is {Aa.shape}, Ab is {Ab.shape}, "
            f"d has trailing dimension {d2.shape[-1]}"
        )
    C = Aa + Ab
    try:
        cho = cho_factor(C, lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("A_a + A_b is not positive definite")
    lead = d2.shape[:-1]
    flat = d2.reshape(-1, p)
    u = flat @ Aa
    w = flat @ Ab
    qp = _chol_quad(cho, u + w)
    qm = _chol_quad(cho, u - w)
    q = np.maximum(0.25 * (qp - qm), 0.0).reshape(lead)
    return float(q[0]) if scalar else q


def _zero_lag_variance(params: KernelParams) -> float:
    p = params.dim
    return math.pi ** (p / 2.0) * params.v * params.v / math.sqrt(np.linalg.det(params.A))


def cov_self_sqexp(d, params: KernelParams) -> float | np.ndarray:
    """Squared-exponential self-covariance k(d) = pi^(p/2) v^2 |A|^(-1/2) exp(-d'Ad/4)."""
    d = np.asarray(d, dtype=float)
    scalar = d.ndim <= 1
    d2 = np.atleast_2d(d) if d.ndim <= 1 else d
    if d2.shape[-1] != params.dim:
        raise ValueError("displacement dimension does not match A")
    dAd = np.einsum("...i,ij,...j->...", d2, params.A, d2)
    k = _zero_lag_variance(params) * np.exp(-0.25 * dAd)
    return float(k[0]) if scalar else k


def cov_cross_general(base, d, pa: KernelParams, pb: KernelParams) -> float | np.ndarray:
    """Shared-noise cross-covariance with an arbitrary isotropic correlation.

    ``k_ab(d) = v_a v_b (2 pi)^(p/2) |A_a + A_b|^(-1/2) base(sqrt(Q_ab(d)))``.

    `base` must satisfy base(0) = 1 and be a valid isotropic correlation
    on R^p for every p; that is the caller's responsibility.  With
    ``base(m) = exp(-m^2/2)`` this reduces to :func:`cov_cross_sqexp`.
    """
    if pa.dim != pb.dim:
        raise ValueError("kernel parameter dimensions differ")
    q = quad_form(d, pa.A, pb.A)
    p = pa.dim
    detC = np.linalg.det(pa.A + pb.A)
    coef = (2.0 * math.pi) ** (p / 2.0) * (pa.v * pb.v) / math.sqrt(detC)
    return coef * base(np.sqrt(q))


def cov_cross_sqexp(d, pa: KernelParams, pb: KernelParams) -> float | np.ndarray:
    """Cross-covariance of two Gaussian-kernel processes sharing one white noise."""
    return cov_cross_general(lambda m: np.exp(-0.5 * m * m), d, pa, pb)


def cov_cross_family(family: CovFamily, d, pa: KernelParams, pb: KernelParams):
    """Cross-covariance with the named family's correlation as the base."""
    shape = _merged_shape(pa, pb)
    return cov_cross_general(lambda m: _corr(family, m, **shape), d, pa, pb)


def cov_iso(family: CovFamily, d, params: KernelParams) -> float | np.ndarray:
    """Self-covariance of one process under the selected family.

    Every family is normalised to the zero-lag variance
    ``pi^(p/2) v^2 |A|^(-1/2)`` and evaluated at the scaled distance
    ``m = sqrt(d' A d / 2)``, which makes `cov_iso` the a = b case of the
    shared-noise cross construction.  Missing shape parameters fall back
    to the documented defaults (nu = 1.5, gamma = 1.5, alpha = 1.0).
    """
    d = np.asarray(d, dtype=float)
    scalar = d.ndim <= 1
    d2 = np.atleast_2d(d) if d.ndim <= 1 else d
    if d2.shape[-1] != params.dim:
        raise ValueError("displacement dimension does not match A")
    dAd = np.einsum("...i,ij,...j->...", d2, params.A, d2)
    m = np.sqrt(np.maximum(0.5 * dAd, 0.0))
    k = _zero_lag_variance(params) * _corr(
        family, m, nu=params.nu, gamma=params.gamma, alpha=params.alpha
    )
    return float(k[0]) if scalar else k


def iso_gram(family: CovFamily, D: np.ndarray, params: KernelParams) -> np.ndarray:
    """Vectorised `cov_iso` over a displacement array D of shape (..., p)."""
    dAd = np.einsum("...i,ij,...j->...", D, params.A, D)
    m = np.sqrt(np.maximum(0.5 * dAd, 0.0))
    return _zero_lag_variance(params) * _corr(
        family, m, nu=params.nu, gamma=params.gamma, alpha=params.alpha
    )


def cross_gram(
    family: CovFamily, D: np.ndarray, pa: KernelParams, pb: KernelParams
) -> np.ndarray:
    """Vectorised `cov_cross_family` over a displacement array of shape (..., p)."""
    q = quad_form(D, pa.A, pb.A)
    p = pa.dim
    detC = np.linalg.det(pa.A + pb.A)
    coef = (2.0 * math.pi) ** (p / 2.0) * (pa.v * pb.v) / math.sqrt(detC)
    return coef * _corr(family, np.sqrt(q), **_merged_shape(pa, pb))
