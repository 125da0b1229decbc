"""Numeric diagnostics: RKHS norm, the log-determinant regret term and
its empirical growth with sample size, and positive-definiteness audits
of the assembled covariance."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .covariance import MCGPHyperparams, StackedInputs, assemble_K
from .kernels import CovFamily, KernelParams

__all__ = [
    "RegretCurve",
    "regret_term",
    "rkhs_norm",
    "regret_growth",
    "pd_audit",
    "uniform_theta",
]


@dataclass(frozen=True)
class RegretCurve:
    """Averaged regret log|I + delta K_n| against sample size."""

    sizes: tuple
    regret: tuple
    delta: float

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sizes must be strictly increasing")
        if any(r < -1e-9 for r in self.regret):
            raise ValueError("regret values must be nonnegative")

    @property
    def regret_over_n(self) -> tuple:
        return tuple(r / n for r, n in zip(self.regret, self.sizes))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n", "regret", "regret_over_n"])
        for n, r in zip(self.sizes, self.regret):
            writer.writerow([n, repr(r), repr(r / n)])
        return buf.getvalue()


def regret_term(K: np.ndarray, delta: float) -> float:
    """log|I + delta K| through a Cholesky factorisation; nonnegative for
    positive-semidefinite K."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    K = np.asarray(K, dtype=float)
    M = np.eye(K.shape[0]) + delta * K
    L = np.linalg.cholesky(M)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def rkhs_norm(alpha, K) -> float:
    """Squared norm a' K a of the kernel-section expansion with
    coefficients a; nonnegative for positive-semidefinite K."""
    alpha = np.asarray(alpha, dtype=float)
    K = np.asarray(K, dtype=float)
    if K.shape != (alpha.shape[0], alpha.shape[0]):
        raise ValueError(
            f"dimension mismatch: alpha has length {alpha.shape[0]}, K is {K.shape}"
        )
    return max(float(alpha @ (K @ alpha)), 0.0)


def uniform_theta(
    family: CovFamily, amplitude2: float = 0.04, precision: float = 1.0, p: int = 1
) -> MCGPHyperparams:
    """All four latent processes from one family with common amplitude."""
    v = float(np.sqrt(amplitude2))
    kp = KernelParams(v=v, A=precision * np.eye(p))
    return MCGPHyperparams(
        shared_family=family,
        xi1=kp,
        xi2=kp,
        eta1_family=family,
        eta1=kp,
        eta2_family=family,
        eta2=kp,
    )


def regret_growth(
    family: CovFamily,
    sizes,
    delta: float,
    seed: int,
    amplitude2: float = 0.04,
    precision: float = 1.0,
    p: int = 1,
    n_draws: int = 20,
    input_range=(-5.0, 5.0),
) -> RegretCurve:
    """Empirical growth of E[log|I + delta K_n|] with n.

    For each size, inputs are drawn uniformly over `input_range` and the
    regret term of the assembled covariance is averaged over `n_draws`
    draws.  Sizes count total observations, split evenly between the
    two components.
    """
    sizes = [int(n) for n in sizes]
    theta = uniform_theta(family, amplitude2=amplitude2, precision=precision, p=p)
    rng = np.random.default_rng(seed)
    lo, hi = input_range
    means = []
    for n in sizes:
        n1 = n // 2
        n2 = n - n1
        vals = []
        for _ in range(n_draws):
            x1 = rng.uniform(lo, hi, size=(n1, p))
            x2 = rng.uniform(lo, hi, size=(n2, p))
            K = assemble_K(StackedInputs(x1, x2), theta)
            if not K.any():
                vals.append(0.0)
                continue
            vals.append(regret_term(K, delta))
        means.append(float(np.mean(vals)))
    return RegretCurve(sizes=tuple(sizes), regret=tuple(means), delta=delta)


_AUDIT_FAMILIES = (
    CovFamily.SQUARED_EXPONENTIAL,
    CovFamily.MATERN,
    CovFamily.GAMMA_EXPONENTIAL,
    CovFamily.RATIONAL_QUADRATIC,
)


def _random_kernel(rng, p, family) -> KernelParams:
    v = float(np.exp(rng.uniform(-2.0, 0.5)))
    A = np.diag(np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=p)))
    kwargs = {}
    if family is CovFamily.MATERN:
        kwargs["nu"] = float(rng.uniform(0.3, 5.0))
    elif family is CovFamily.GAMMA_EXPONENTIAL:
        kwargs["gamma"] = float(rng.uniform(0.2, 2.0))
    elif family is CovFamily.RATIONAL_QUADRATIC:
        kwargs["alpha"] = float(np.exp(rng.uniform(np.log(0.2), np.log(10.0))))
    return KernelParams(v=v, A=A, **kwargs)


def pd_audit(n_draws: int = 1000, seed: int = 0, p: int = 1, size_range=(3, 10)):
    """Stress positive definiteness over random inputs, families and
    hyperparameters.

    Each draw assembles the stacked covariance for a random mix of
    families, records the ratio of the smallest eigenvalue to the
    spectral norm, and whether a Cholesky succeeds after adding 1e-6
    relative jitter.  Returns a list of per-draw records.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_draws):
        shared = _AUDIT_FAMILIES[rng.integers(len(_AUDIT_FAMILIES))]
        f1 = _AUDIT_FAMILIES[rng.integers(len(_AUDIT_FAMILIES))]
        f2 = _AUDIT_FAMILIES[rng.integers(len(_AUDIT_FAMILIES))]
        shape = _random_kernel(rng, p, shared)
        theta = MCGPHyperparams(
            shared_family=shared,
            xi1=_merge_shape(_random_kernel(rng, p, shared), shape),
            xi2=_merge_shape(_random_kernel(rng, p, shared), shape),
            eta1_family=f1,
            eta1=_random_kernel(rng, p, f1),
            eta2_family=f2,
            eta2=_random_kernel(rng, p, f2),
        )
        n1 = int(rng.integers(size_range[0], size_range[1] + 1))
        n2 = int(rng.integers(size_range[0], size_range[1] + 1))
        x1 = rng.uniform(-5.0, 5.0, size=(n1, p))
        x2 = rng.uniform(-5.0, 5.0, size=(n2, p))
        K = assemble_K(StackedInputs(x1, x2), theta)
        eigs = np.linalg.eigvalsh(K)
        norm = float(np.max(np.abs(eigs)))
        min_ratio = float(eigs[0] / norm) if norm > 0 else 0.0
        jitter = 1e-6 * float(np.mean(np.diag(K)))
        try:
            np.linalg.cholesky(K + jitter * np.eye(K.shape[0]))
            ok = True
        except np.linalg.LinAlgError:
            ok = False
        rows.append(
            {
                "draw": i,
                "families": (shared.value, f1.value, f2.value),
                "n": n1 + n2,
                "min_eig_ratio": min_ratio,
                "chol_ok": ok,
            }
        )
    return rows


def _merge_shape(kp: KernelParams, shape: KernelParams) -> KernelParams:
    """Give a shared-pair kernel the pair's common shape parameters."""
    return KernelParams(v=kp.v, A=kp.A, nu=shape.nu, gamma=shape.gamma, alpha=shape.alpha)


def pd_audit_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["draw", "shared_family", "eta1_family", "eta2_family", "n", "min_eig_ratio", "chol_ok"])
    for r in rows:
        writer.writerow(
            [r["draw"], *r["families"], r["n"], repr(r["min_eig_ratio"]), int(r["chol_ok"])]
        )
    return buf.getvalue()
