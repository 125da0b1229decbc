"""Stacked covariance assembly, factorisation and exact sampling.

The bivariate latent field stacks component-1 values before component-2
values; prediction points (tau1*, tau2*) are appended after the
component-2 block.  Every downstream index computation relies on this
ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import CovFamily, KernelParams, cross_gram, iso_gram

__all__ = [
    "StackedInputs",
    "MCGPHyperparams",
    "MCGPCovariance",
    "CholFactor",
    "SingularCovarianceError",
    "DEFAULT_JITTER_SCHEDULE",
    "assemble_K",
    "assemble_K_plus",
    "chol_psd",
    "sample_mcgp",
]

# multiples of the mean diagonal, tried in order
DEFAULT_JITTER_SCHEDULE = (0.0, 1e-10, 1e-8, 1e-6)


class SingularCovarianceError(np.linalg.LinAlgError):
    """Cholesky failed at every jitter level."""

    def __init__(self, message, jitter):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True)
class StackedInputs:
    """Covariance inputs for the two components, shapes (n1, p) and (n2, p)."""

    x1: np.ndarray
    x2: np.ndarray

    def __post_init__(self):
        x1 = _as_points(self.x1, "x1")
        x2 = _as_points(self.x2, "x2")
        if x1.shape[1] != x2.shape[1]:
            raise ValueError(
                f"input dimensions differ: x1 has p={x1.shape[1]}, x2 has p={x2.shape[1]}"
            )
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)

    @property
    def n1(self) -> int:
        return self.x1.shape[0]

    @property
    def n2(self) -> int:
        return self.x2.shape[0]

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    @property
    def dim(self) -> int:
        return self.x1.shape[1]


def _as_points(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"{name} must be a nonempty (n, p) array")
    x = x.copy()
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class MCGPHyperparams:
    """Kernel parameters of the four latent processes.

    xi1 and xi2 convolve the same white noise and therefore share one
    covariance family; eta1 and eta2 are component-specific and may use
    any family each.
    """

    shared_family: CovFamily
    xi1: KernelParams
    xi2: KernelParams
    eta1_family: CovFamily
    eta1: KernelParams
    eta2_family: CovFamily
    eta2: KernelParams

    def __post_init__(self):
        dims = {self.xi1.dim, self.xi2.dim, self.eta1.dim, self.eta2.dim}
        if len(dims) != 1:
            raise ValueError(f"kernel parameter dimensions differ: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.xi1.dim

    @property
    def has_cross_dependence(self) -> bool:
        return self.xi1.v * self.xi2.v != 0.0


def _displacements(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    return xa[:, None, :] - xb[None, :, :]


def assemble_K(inputs: StackedInputs, theta: MCGPHyperparams) -> np.ndarray:
    """Stacked (n1+n2) x (n1+n2) covariance of the bivariate field.

    Diagonal blocks add the shared-process and component-specific
    covariances; off-diagonal blocks carry the shared-process
    cross-covariance only.
    """
    if inputs.dim != theta.dim:
        raise ValueError(
            f"input dimension {inputs.dim} does not match kernel dimension {theta.dim}"
        )
    D11 = _displacements(inputs.x1, inputs.x1)
    D22 = _displacements(inputs.x2, inputs.x2)
    D12 = _displacements(inputs.x1, inputs.x2)
    K11 = iso_gram(theta.shared_family, D11, theta.xi1) + iso_gram(
        theta.eta1_family, D11, theta.eta1
    )
    K22 = iso_gram(theta.shared_family, D22, theta.xi2) + iso_gram(
        theta.eta2_family, D22, theta.eta2
    )
    K12 = cross_gram(theta.shared_family, D12, theta.xi1, theta.xi2)
    n1, n2 = inputs.n1, inputs.n2
    K = np.empty((n1 + n2, n1 + n2))
    K[:n1, :n1] = K11
    K[:n1, n1:] = K12
    K[n1:, :n1] = K12.T
    K[n1:, n1:] = K22
    return K


def assemble_K_plus(inputs: StackedInputs, xstar, theta: MCGPHyperparams) -> np.ndarray:
    """Covariance of (tau, tau1*, tau2*): training blocks plus one new point per component.

    The top-left (n1+n2) block equals ``assemble_K(inputs, theta)`` bit
    for bit; the appended rows/columns follow the same block rules.
    """
    xs1, xs2 = _as_star_pair(xstar, inputs.dim)
    ext = StackedInputs(
        np.vstack([inputs.x1, xs1[None, :]]),
        np.vstack([inputs.x2, xs2[None, :]]),
    )
    Kext = assemble_K(ext, theta)
    n1, n2 = inputs.n1, inputs.n2
    # extended order: [x1.., xs1, x2.., xs2] -> [x1.., x2.., xs1, xs2]
    perm = np.concatenate(
        [
            np.arange(n1),
            np.arange(n1 + 1, n1 + 1 + n2),
            [n1],
            [n1 + 1 + n2],
        ]
    )
    return Kext[np.ix_(perm, perm)]


def _as_star_pair(xstar, p):
    xs1, xs2 = xstar
    xs1 = np.atleast_1d(np.asarray(xs1, dtype=float))
    xs2 = np.atleast_1d(np.asarray(xs2, dtype=float))
    if xs1.shape != (p,) or xs2.shape != (p,):
        raise ValueError(f"each prediction point must be a {p}-vector")
    return xs1, xs2


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor of K + jitter * I.

    `matrix` is the jittered matrix the factor reproduces: L @ L.T ==
    matrix.  All downstream quadratic forms and log-determinants use L;
    the inverse is never formed.
    """

    matrix: np.ndarray
    L: np.ndarray
    jitter: float

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))


def chol_psd(K: np.ndarray, jitter_schedule=None) -> CholFactor:
    """Cholesky with an escalating jitter schedule.

    Jitter levels are multiples of the mean diagonal of K (absolute when
    the diagonal is zero).  The first level that factorises wins and the
    applied jitter is returned with the factor.

    Raises
    ------
    SingularCovarianceError
        If every level fails; carries the last attempted jitter.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"K must be square, got {K.shape}")
    if jitter_schedule is None:
        jitter_schedule = DEFAULT_JITTER_SCHEDULE
    scale = float(np.mean(np.diag(K)))
    if scale <= 0.0:
        scale = 1.0
    jitter = 0.0
    for level in jitter_schedule:
        jitter = level * scale
        Kj = K if jitter == 0.0 else K + jitter * np.eye(K.shape[0])
        try:
            L = np.linalg.cholesky(Kj)
        except np.linalg.LinAlgError:
            continue
        return CholFactor(matrix=Kj, L=L, jitter=jitter)
    raise SingularCovarianceError(
        f"covariance not positive definite at any jitter level (last tried {jitter:g})",
        jitter,
    )


def sample_mcgp(inputs: StackedInputs, theta: MCGPHyperparams, seed: int):
    """Exact draw tau = L eps with eps standard normal; deterministic per seed.

    Returns (tau1, tau2) of lengths n1 and n2.  The marginal law is
    N(0, K + jitter * I) for the jitter applied by :func:`chol_psd`.
    """
    K = assemble_K(inputs, theta)
    n1 = inputs.n1
    if not K.any():
        # all amplitudes zero: the field is identically zero
        return np.zeros(n1), np.zeros(inputs.n2)
    cf = chol_psd(K)
    eps = np.random.default_rng(seed).standard_normal(inputs.n)
    tau = cf.L @ eps
    return tau[:n1], tau[n1:]


@dataclass(frozen=True)
class MCGPCovariance:
    """Covariance builder bound to one hyperparameter set."""

    theta: MCGPHyperparams

    def gram(self, inputs: StackedInputs) -> np.ndarray:
        return assemble_K(inputs, self.theta)

    def gram_plus(self, inputs: StackedInputs, xstar) -> np.ndarray:
        return assemble_K_plus(inputs, xstar, self.theta)

    @property
    def has_cross_dependence(self) -> bool:
        return self.theta.has_cross_dependence
