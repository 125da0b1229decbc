"""Laplace approximation of the marginal likelihood and empirical-Bayes
estimation of the mean coefficients and kernel hyperparameters.

The latent-field mode is found by damped Newton in the stabilised
(W, K) parameterisation: iterates live in a = K^{-1} tau, every linear
solve goes through the Cholesky factor of B = I + W^{1/2} K W^{1/2},
and K^{-1} is never formed.  The same machinery serves the augmented
prediction problem, where two trailing slots carry a linear term
w' tau* instead of a Poisson observation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize
from scipy.special import gammaln

from .covariance import (
    CholFactor,
    MCGPCovariance,
    MCGPHyperparams,
    SingularCovarianceError,
    assemble_K,
    chol_psd,
)
from .kernels import CovFamily, KernelParams
from .likelihood import Dataset, RegressionCoefficients, poisson_logpmf

__all__ = [
    "OptimOptions",
    "ModelSpec",
    "MODEL_SPECS",
    "ModeResult",
    "ModeConvergenceError",
    "FitError",
    "FittedModel",
    "find_mode",
    "laplace_marginal_loglik",
    "fit",
    "aic",
]

_FAILED_OBJECTIVE = 1e13


class ModeConvergenceError(RuntimeError):
    """Newton mode search did not reach the gradient tolerance."""

    def __init__(self, message, grad_norm=None, n_iter=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.n_iter = n_iter


class FitError(RuntimeError):
    """Every optimisation start failed; per-start diagnostics attached."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class OptimOptions:
    """Controls for the outer quasi-Newton search and the inner mode finder."""

    max_iter: int = 100
    grad_step: float = 1e-5
    mode_tol: float = 1e-8
    mode_max_iter: int = 200
    outer_tol: float = 1e-6
    n_starts: int = 3
    seed: int = 0


@dataclass(frozen=True)
class ModelSpec:
    """Covariance family per latent process plus fitting controls.

    ``shared_family=None`` removes the shared processes entirely (the
    two components become independent GPs).  Shape parameters default to
    fixed values and are searched over only when ``free_shapes`` is set.
    """

    shared_family: Optional[CovFamily] = CovFamily.SQUARED_EXPONENTIAL
    eta1_family: CovFamily = CovFamily.SQUARED_EXPONENTIAL
    eta2_family: CovFamily = CovFamily.SQUARED_EXPONENTIAL
    nu: float = 1.5
    gamma: float = 1.5
    alpha: float = 1.0
    free_shapes: bool = False
    q1: Optional[int] = None
    q2: Optional[int] = None


MODEL_SPECS = {
    "model1": ModelSpec(
        shared_family=CovFamily.SQUARED_EXPONENTIAL,
        eta1_family=CovFamily.SQUARED_EXPONENTIAL,
        eta2_family=CovFamily.GAMMA_EXPONENTIAL,
    ),
    "model2": ModelSpec(
        shared_family=CovFamily.RATIONAL_QUADRATIC,
        eta1_family=CovFamily.RATIONAL_QUADRATIC,
        eta2_family=CovFamily.RATIONAL_QUADRATIC,
    ),
    "model3": ModelSpec(
        shared_family=CovFamily.MATERN,
        eta1_family=CovFamily.MATERN,
        eta2_family=CovFamily.MATERN,
    ),
    "model4": ModelSpec(),
    "indep": ModelSpec(shared_family=None),
}


@dataclass
class ModeResult:
    """Mode of the latent-field log-posterior kernel."""

    tau: np.ndarray
    a: np.ndarray
    W: np.ndarray
    psi: float
    converged: bool
    n_iter: int
    grad_norm: float
    psi_trace: list = field(default_factory=list)


def _newton_mode(K, offset, z, n_obs, w_star, tol, max_iter, a0=None):
    """Maximise psi(a) = -a'Ka/2 + sum_obs logpmf + w' tau_star, tau = K a.

    The first `n_obs` slots carry Poisson observations with counts `z`
    and linear-predictor offsets `offset`; trailing slots contribute the
    linear term w_star' tau only.  Line search halves the Newton step
    until psi does not decrease, so accepted iterates are monotone up to
    rounding.  The gradient tolerance is applied relative to the count
    scale: gradient entries are z - mu, whose float evaluation noise
    grows with the counts, so an absolute criterion would be
    unattainable for large-count data.
    """
    N = K.shape[0]
    n_star = N - n_obs
    z_o = np.asarray(z, dtype=float)[:n_obs]
    off_o = np.asarray(offset, dtype=float)[:n_obs]
    w_star = np.zeros(0) if w_star is None else np.asarray(w_star, dtype=float)
    if w_star.shape[0] != n_star:
        raise ValueError("w_star length does not match trailing slots")
    const_lg = float(np.sum(gammaln(z_o + 1.0)))
    gtol = tol * (1.0 + float(np.max(z_o, initial=0.0)))

    def eval_psi(a, tau):
        eta_o = off_o + tau[:n_obs]
        with np.errstate(over="ignore"):
            mu_o = np.exp(eta_o)
        ll = float(z_o @ eta_o) - float(np.sum(mu_o)) - const_lg
        if n_star:
            ll += float(w_star @ tau[n_obs:])
        return -0.5 * float(a @ tau) + ll, mu_o

    a = np.zeros(N) if a0 is None else np.asarray(a0, dtype=float).copy()
    tau = K @ a
    psi, mu_o = eval_psi(a, tau)
    if not np.isfinite(psi):
        a = np.zeros(N)
        tau = K @ a
        psi, mu_o = eval_psi(a, tau)
    trace = [psi]
    n_steps = 0
    converged = False
    gnorm = np.inf
    while True:
        g = np.empty(N)
        g[:n_obs] = z_o - mu_o
        g[n_obs:] = w_star
        gnorm = float(np.max(np.abs(g - a)))
        if gnorm < gtol:
            converged = True
            break
        if n_steps >= max_iter:
            break
        Wd = np.zeros(N)
        Wd[:n_obs] = mu_o
        sW = np.sqrt(Wd)
        B = np.eye(N) + sW[:, None] * K * sW[None, :]
        try:
            LB = np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            break
        b = Wd * tau + g
        a_new = b - sW * cho_solve((LB, True), sW * (K @ b))
        step = a_new - a
        # inside the Newton basin psi differences fall below float
        # resolution; take full steps there and let the gradient check
        # terminate, otherwise backtrack until psi stops decreasing
        # (up to rounding noise)
        in_basin = gnorm <= 1e-3 * (1.0 + float(np.max(Wd, initial=0.0)))
        floor = psi - 1e-11 * (1.0 + abs(psi))
        s = 1.0
        improved = False
        for _ in range(60):
            a_try = a + s * step
            tau_try = K @ a_try
            psi_try, mu_try = eval_psi(a_try, tau_try)
            if np.isfinite(psi_try) and (psi_try >= floor or (in_basin and s == 1.0)):
                a, tau, psi, mu_o = a_try, tau_try, psi_try, mu_try
                improved = True
                break
            s *= 0.5
        if not improved:
            break
        n_steps += 1
        trace.append(psi)
    Wfull = np.zeros(N)
    Wfull[:n_obs] = mu_o
    return ModeResult(
        tau=tau,
        a=a,
        W=Wfull,
        psi=psi,
        converged=converged,
        n_iter=n_steps,
        grad_norm=gnorm,
        psi_trace=trace,
    )


def find_mode(
    data: Dataset,
    beta: RegressionCoefficients,
    kfactor: CholFactor,
    tol: float = 1e-8,
    max_iter: int = 50,
    a0=None,
) -> ModeResult:
    """Mode of phi(tau) for the training data; see :func:`mcgpp.likelihood.phi`."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    offset = data.linear_predictor(beta) + data.log_exposure
    return _newton_mode(
        kfactor.matrix, offset, data.counts, data.n, None, tol, max_iter, a0=a0
    )


def _half_logdet_B(K: np.ndarray, W: np.ndarray) -> float:
    """0.5 * log|I + W^{1/2} K W^{1/2}|, the stabilised form of
    0.5 * (log|W + K^{-1}| + log|K|)."""
    sW = np.sqrt(W)
    B = np.eye(K.shape[0]) + sW[:, None] * K * sW[None, :]
    LB = np.linalg.cholesky(B)
    return float(np.sum(np.log(np.diag(LB))))


def _laplace_from_gram(K, data, beta, mode_tol, mode_max_iter, a0=None):
    """Laplace log-marginal for a prebuilt covariance matrix.

    Returns (loglik, mode, kfactor).  Raises ModeConvergenceError when
    the inner Newton search fails, SingularCovarianceError when the
    covariance cannot be factorised.
    """
    kf = chol_psd(K)
    offset = data.linear_predictor(beta) + data.log_exposure
    mode = _newton_mode(
        kf.matrix, offset, data.counts, data.n, None, mode_tol, mode_max_iter, a0=a0
    )
    if not mode.converged and a0 is not None:
        # a stalled warm start can hide a solvable problem
        mode = _newton_mode(
            kf.matrix, offset, data.counts, data.n, None, mode_tol, mode_max_iter
        )
    if not mode.converged:
        raise ModeConvergenceError(
            f"mode search stalled at gradient norm {mode.grad_norm:.3e}",
            grad_norm=mode.grad_norm,
            n_iter=mode.n_iter,
        )
    loglik = mode.psi - _half_logdet_B(kf.matrix, mode.W)
    return loglik, mode, kf


def laplace_marginal_loglik(
    beta: RegressionCoefficients,
    theta: MCGPHyperparams,
    data: Dataset,
    mode_tol: float = 1e-8,
    mode_max_iter: int = 50,
) -> float:
    """Laplace approximation of the marginal log-likelihood at (beta, theta).

    With all kernel amplitudes zero the latent prior is a point mass at
    zero and the exact value sum(logpmf(z; U beta)) is returned.
    """
    K = assemble_K(data.inputs, theta)
    if not K.any():
        eta = data.linear_predictor(beta)
        return float(np.sum(poisson_logpmf(data.counts, eta, data.log_exposure)))
    loglik, _, _ = _laplace_from_gram(K, data, beta, mode_tol, mode_max_iter)
    return loglik


@dataclass(frozen=True)
class FittedModel:
    """Result of an empirical-Bayes fit.

    `cov` rebuilds covariance matrices for prediction; `kfactor` holds
    the training factorisation (None for models reloaded from disk);
    `tau0` is the Laplace mode at the optimum.
    """

    kind: str
    beta: RegressionCoefficients
    theta: object
    cov: object
    tau0: np.ndarray
    kfactor: Optional[CholFactor]
    loglik: float
    n_params: int
    converged: bool
    n_iter: int
    spec: Optional[ModelSpec] = None
    diagnostics: dict = field(default_factory=dict)


def aic(model: FittedModel) -> float:
    """Akaike information criterion, -2 loglik + 2 (free parameter count)."""
    return -2.0 * model.loglik + 2.0 * model.n_params


# ---------------------------------------------------------------------------
# parameter transforms


def _sigmoid(t):
    return 1.0 / (1.0 + np.exp(-t))


_SHAPE_TRANSFORMS = {
    # family -> (to unconstrained, from unconstrained, bounds)
    CovFamily.MATERN: (math.log, math.exp, (math.log(0.25), math.log(8.0))),
    CovFamily.GAMMA_EXPONENTIAL: (
        lambda g: math.log(g / (2.0 - g)),
        lambda t: 2.0 * _sigmoid(t),
        (-6.0, 6.0),
    ),
    CovFamily.RATIONAL_QUADRATIC: (math.log, math.exp, (-4.0, 5.0)),
}

_LOGV2_BOUNDS = (-30.0, 8.0)
_LOGA_BOUNDS = (-8.0, 8.0)


def _spec_shape(spec: ModelSpec, family: CovFamily) -> Optional[float]:
    if family is CovFamily.MATERN:
        return spec.nu
    if family is CovFamily.GAMMA_EXPONENTIAL:
        return spec.gamma
    if family is CovFamily.RATIONAL_QUADRATIC:
        return spec.alpha
    return None


def _kernel_with_shape(v, A, family, shape):
    kwargs = {}
    if family is CovFamily.MATERN:
        kwargs["nu"] = shape
    elif family is CovFamily.GAMMA_EXPONENTIAL:
        kwargs["gamma"] = shape
    elif family is CovFamily.RATIONAL_QUADRATIC:
        kwargs["alpha"] = shape
    return KernelParams(v=v, A=A, **kwargs)


class _Transform:
    """Maps the flat unconstrained optimiser vector to (beta, theta).

    Layout: beta1, beta2, then per kernel block (xi1, xi2, eta1, eta2)
    log v^2 followed by the log-diagonal of A; one shared shape slot for
    the xi pair and one per eta block when shapes are free.  A matrices
    are searched as diagonals; full matrices are accepted at the API
    boundary but not optimised over.
    """

    def __init__(self, spec: ModelSpec, q1: int, q2: int, p: int):
        self.spec = spec
        self.q1, self.q2, self.p = q1, q2, p
        self.shared = spec.shared_family is not None
        self.labels: list[str] = []
        self.bounds: list[tuple] = []
        for a, q in (("1", q1), ("2", q2)):
            for j in range(q):
                self.labels.append(f"beta{a}[{j}]")
                self.bounds.append((None, None))
        blocks = (["xi1", "xi2"] if self.shared else []) + ["eta1", "eta2"]
        for name in blocks:
            self.labels.append(f"{name}.logv2")
            self.bounds.append(_LOGV2_BOUNDS)
            for k in range(p):
                self.labels.append(f"{name}.logA[{k}]")
                self.bounds.append(_LOGA_BOUNDS)
        self.shape_slots: list[tuple] = []  # (owner, family)
        if spec.free_shapes:
            if self.shared and spec.shared_family in _SHAPE_TRANSFORMS:
                self.shape_slots.append(("xi", spec.shared_family))
            for name, fam in (("eta1", spec.eta1_family), ("eta2", spec.eta2_family)):
                if fam in _SHAPE_TRANSFORMS:
                    self.shape_slots.append((name, fam))
        for owner, fam in self.shape_slots:
            fwd, _, bnds = _SHAPE_TRANSFORMS[fam]
            self.labels.append(f"{owner}.shape")
            self.bounds.append(bnds)
        self.n_params = len(self.labels)
        self.n_beta = q1 + q2

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        beta = RegressionCoefficients(
            b1=x[: self.q1], b2=x[self.q1 : self.q1 + self.q2]
        )
        i = self.n_beta
        block = {}
        names = (["xi1", "xi2"] if self.shared else []) + ["eta1", "eta2"]
        for name in names:
            v = math.exp(0.5 * x[i])
            A = np.diag(np.exp(x[i + 1 : i + 1 + self.p]))
            block[name] = (v, A)
            i += 1 + self.p
        shapes = {}
        for owner, fam in self.shape_slots:
            _, inv, _ = _SHAPE_TRANSFORMS[fam]
            shapes[owner] = inv(x[i])
            i += 1
        spec = self.spec

        def build(name, family, owner):
            if name in block:
                v, A = block[name]
            else:
                v, A = 0.0, np.eye(self.p)
            shape = shapes.get(owner, _spec_shape(spec, family))
            return _kernel_with_shape(v, A, family, shape)

        shared_family = spec.shared_family or CovFamily.SQUARED_EXPONENTIAL
        theta = MCGPHyperparams(
            shared_family=shared_family,
            xi1=build("xi1", shared_family, "xi"),
            xi2=build("xi2", shared_family, "xi"),
            eta1_family=spec.eta1_family,
            eta1=build("eta1", spec.eta1_family, "eta1"),
            eta2_family=spec.eta2_family,
            eta2=build("eta2", spec.eta2_family, "eta2"),
        )
        return beta, theta

    def initial(self, data: Dataset) -> np.ndarray:
        b1 = _poisson_irls(data.U1, data.z1, np.log(data.E1))
        b2 = _poisson_irls(data.U2, data.z2, np.log(data.E2))
        x = [b1, b2]
        var1 = _working_residual_var(data.U1, data.z1, data.E1, b1)
        var2 = _working_residual_var(data.U2, data.z2, data.E2, b2)
        loga = _median_lengthscale_logA(np.vstack([data.x1, data.x2]))
        n_blocks = 2 if self.shared else 1
        blocks = (
            [("xi1", var1), ("xi2", var2)] if self.shared else []
        ) + [("eta1", var1), ("eta2", var2)]
        for _, var in blocks:
            logv2 = math.log(max(0.1 * var / n_blocks, 1e-6))
            x.append([np.clip(logv2, *_LOGV2_BOUNDS)])
            x.append(np.clip(loga, *_LOGA_BOUNDS))
        for owner, fam in self.shape_slots:
            fwd, _, bnds = _SHAPE_TRANSFORMS[fam]
            x.append([np.clip(fwd(_spec_shape(self.spec, fam)), *bnds)])
        return np.concatenate([np.atleast_1d(np.asarray(v, float)) for v in x])

    def pack(self, beta: RegressionCoefficients, theta: MCGPHyperparams) -> np.ndarray:
        """Inverse of unpack for diagonal-A hyperparameters."""
        x = [beta.b1, beta.b2]
        blocks = ([theta.xi1, theta.xi2] if self.shared else []) + [theta.eta1, theta.eta2]
        for kp in blocks:
            x.append([2.0 * math.log(kp.v)])
            x.append(np.log(np.diag(kp.A)))
        for owner, fam in self.shape_slots:
            fwd, _, _ = _SHAPE_TRANSFORMS[fam]
            src = {"xi": theta.xi1, "eta1": theta.eta1, "eta2": theta.eta2}[owner]
            field = {
                CovFamily.MATERN: "nu",
                CovFamily.GAMMA_EXPONENTIAL: "gamma",
                CovFamily.RATIONAL_QUADRATIC: "alpha",
            }[fam]
            val = getattr(src, field)
            x.append([fwd(val if val is not None else _spec_shape(self.spec, fam))])
        return np.concatenate([np.atleast_1d(np.asarray(v, float)) for v in x])

    def theta_norm(self, x) -> float:
        return float(np.linalg.norm(np.asarray(x)[self.n_beta :]))


def _poisson_irls(U, z, logE, n_iter=50, tol=1e-10):
    """Poisson GLM coefficients ignoring the latent field (warm start)."""
    U = np.asarray(U, dtype=float)
    z = np.asarray(z, dtype=float)
    y0 = np.log(np.maximum(z, 0.5)) - logE
    beta, *_ = np.linalg.lstsq(U, y0, rcond=None)
    for _ in range(n_iter):
        lin = np.clip(U @ beta, -30.0, 30.0)
        mu = np.exp(lin + logE)
        Wd = np.maximum(mu, 1e-10)
        yw = lin + (z - mu) / Wd
        sw = np.sqrt(Wd)
        beta_new, *_ = np.linalg.lstsq(sw[:, None] * U, sw * yw, rcond=None)
        if np.max(np.abs(beta_new - beta)) < tol:
            beta = beta_new
            break
        beta = beta_new
    return beta


def _working_residual_var(U, z, E, beta) -> float:
    mu = E * np.exp(np.clip(U @ beta, -30.0, 30.0))
    r = (z - mu) / np.maximum(mu, 1e-8)
    return float(max(np.var(r), 1e-3))


def _median_lengthscale_logA(x: np.ndarray) -> np.ndarray:
    """log of diagonal A entries at 1 / median pairwise distance^2, per dim."""
    out = np.zeros(x.shape[1])
    for k in range(x.shape[1]):
        d = np.abs(x[:, k, None] - x[None, :, k])
        pos = d[d > 0]
        med = float(np.median(pos)) if pos.size else 1.0
        out[k] = -2.0 * math.log(max(med, 1e-6))
    return out


def _run_starts(nll, starts, bounds, opts: OptimOptions, theta_norm, on_start=None):
    """L-BFGS-B with central-difference gradients over each start.

    Returns (best, all_results); raises FitError when every start
    lands in the failure region of the objective.
    """
    results = []
    for xs in starts:
        if on_start is not None:
            on_start()
        if opts.max_iter == 0:
            results.append(
                {"fun": float(nll(xs)), "x": xs, "success": False, "nit": 0, "message": "no steps"}
            )
            continue
        res = minimize(
            nll,
            xs,
            method="L-BFGS-B",
            jac="3-point",
            bounds=bounds,
            options={
                "maxiter": opts.max_iter,
                "ftol": 1e-11,
                "gtol": opts.outer_tol,
                "finite_diff_rel_step": opts.grad_step,
            },
        )
        results.append(
            {
                "fun": float(res.fun),
                "x": res.x,
                "success": bool(res.success),
                "nit": int(res.nit),
                "message": str(res.message),
            }
        )
    ok = [r for r in results if r["fun"] < _FAILED_OBJECTIVE]
    if not ok:
        raise FitError("all optimisation starts failed", diagnostics=results)
    best = min(ok, key=lambda r: (r["fun"], theta_norm(r["x"])))
    return best, results


def fit(data: Dataset, spec: ModelSpec, opts: Optional[OptimOptions] = None) -> FittedModel:
    """Empirical-Bayes fit: quasi-Newton ascent of the Laplace marginal
    over (beta, theta) with central-difference gradients, multistart.

    Ties across starts break on higher loglik, then smaller transformed
    hyperparameter norm.  Raises FitError when every start fails.
    """
    opts = opts or OptimOptions()
    q1, q2 = data.U1.shape[1], data.U2.shape[1]
    if spec.q1 is not None and spec.q1 != q1:
        raise ValueError(f"spec expects q1={spec.q1}, data has {q1}")
    if spec.q2 is not None and spec.q2 != q2:
        raise ValueError(f"spec expects q2={spec.q2}, data has {q2}")
    tr = _Transform(spec, q1, q2, data.inputs.dim)
    inputs = data.inputs
    warm = {"a": None}

    def nll(x):
        try:
            beta, theta = tr.unpack(x)
            K = assemble_K(inputs, theta)
            loglik, mode, _ = _laplace_from_gram(
                K, data, beta, opts.mode_tol, opts.mode_max_iter, a0=warm["a"]
            )
        except (SingularCovarianceError, ModeConvergenceError, np.linalg.LinAlgError, ValueError):
            return _FAILED_OBJECTIVE
        warm["a"] = mode.a
        return -loglik

    x0 = tr.initial(data)
    rng = np.random.default_rng(opts.seed)
    starts = [x0]
    for _ in range(max(opts.n_starts, 1) - 1):
        xs = x0.copy()
        xs[: tr.n_beta] += 0.1 * rng.standard_normal(tr.n_beta)
        xs[tr.n_beta :] += 1.0 * rng.standard_normal(tr.n_params - tr.n_beta)
        lo = np.array([-np.inf if b[0] is None else b[0] for b in tr.bounds])
        hi = np.array([np.inf if b[1] is None else b[1] for b in tr.bounds])
        starts.append(np.clip(xs, lo, hi))

    best, results = _run_starts(
        nll, starts, tr.bounds, opts, tr.theta_norm, on_start=lambda: warm.update(a=None)
    )

    beta, theta = tr.unpack(best["x"])
    K = assemble_K(inputs, theta)
    loglik, mode, kf = _laplace_from_gram(
        K, data, beta, opts.mode_tol, opts.mode_max_iter
    )
    kind = "indep" if spec.shared_family is None else "mcgpp"
    return FittedModel(
        kind=kind,
        beta=beta,
        theta=theta,
        cov=MCGPCovariance(theta),
        tau0=mode.tau,
        kfactor=kf,
        loglik=loglik,
        n_params=tr.n_params,
        converged=bool(best["success"]) and mode.converged,
        n_iter=best["nit"],
        spec=spec,
        diagnostics={"starts": results, "labels": tr.labels},
    )
