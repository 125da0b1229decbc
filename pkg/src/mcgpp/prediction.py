"""Predictive moments at new input points via ratio-of-Laplace integrals.

Every moment is E[exp(w1 tau1* + w2 tau2*) ...] / p(z), with both the
weighted integral and the normaliser p(z) approximated by a Laplace
expansion over the augmented field (tau, tau1*, tau2*), so systematic
Laplace bias partially cancels in the ratio.  The linear w' tau* term
shifts the mode, so the mode is re-found per weight vector; the
curvature matrix keeps zeros in the tau* slots because that term is
linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import chol_psd
from .inference import FittedModel, ModeConvergenceError, _half_logdet_B, _newton_mode
from .likelihood import Dataset

__all__ = [
    "PredictionResult",
    "PredictionNumericsError",
    "latent_moment",
    "predict_mean",
    "predict_var",
    "predict_cross_cov",
    "predict_point",
    "predict_batch",
]

_MOMENT_TOL = 1e-9


class PredictionNumericsError(RuntimeError):
    """A Laplace moment violated an exact inequality beyond tolerance."""


@dataclass
class PredictionResult:
    """Predictive mean vector, 2x2 (co)variance matrix, and the
    maximising augmented-latent mode per moment weight."""

    mean: np.ndarray
    var: np.ndarray
    latent_mode: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        if np.any(self.mean <= 0):
            raise PredictionNumericsError("predictive means must be positive")
        if not np.allclose(self.var, self.var.T):
            raise PredictionNumericsError("predictive variance matrix must be symmetric")
        if np.any(np.diag(self.var) < self.mean - _MOMENT_TOL * np.maximum(1.0, self.mean)):
            raise PredictionNumericsError(
                "predictive variance below the Poisson mixture floor"
            )


class _MomentEngine:
    """Laplace moments for one fitted model at one pair of new points.

    Weight (0, 0) is the normaliser; its log value is cached so that
    moment((0, 0)) is exactly 1.  Modes warm-start from the normaliser
    mode.
    """

    def __init__(self, fitted: FittedModel, data: Dataset, Ustar, xstar, estar=None):
        U1s, U2s = (np.atleast_1d(np.asarray(u, dtype=float)) for u in Ustar)
        if U1s.shape[0] != fitted.beta.b1.shape[0]:
            raise ValueError("U1* length does not match beta1")
        if U2s.shape[0] != fitted.beta.b2.shape[0]:
            raise ValueError("U2* length does not match beta2")
        e1, e2 = (1.0, 1.0) if estar is None else estar
        if e1 <= 0 or e2 <= 0:
            raise ValueError("prediction exposures must be positive")
        self.star_eta = np.array(
            [
                float(U1s @ fitted.beta.b1) + np.log(e1),
                float(U2s @ fitted.beta.b2) + np.log(e2),
            ]
        )
        self.data = data
        self.fitted = fitted
        K_plus = fitted.cov.gram_plus(data.inputs, xstar)
        self.degenerate = not K_plus.any()
        self._lognum_cache: dict = {}
        self._mode_cache: dict = {}
        if not self.degenerate:
            self.kf = chol_psd(K_plus)
            self.offset = np.concatenate(
                [data.linear_predictor(fitted.beta) + data.log_exposure, [0.0, 0.0]]
            )
            self.z = np.concatenate([data.counts, [0.0, 0.0]])

    def mode(self, w):
        w = _check_weights(w)
        if self.degenerate:
            return np.zeros(self.data.n + 2)
        return self._compute(w)[1]

    def log_moment(self, w) -> float:
        w = _check_weights(w)
        lin = float(w[0] * self.star_eta[0] + w[1] * self.star_eta[1])
        if self.degenerate:
            return lin
        return self._compute(w)[0] - self._compute((0.0, 0.0))[0]

    def moment(self, w) -> float:
        return float(np.exp(self.log_moment(w)))

    def _compute(self, w):
        key = (float(w[0]), float(w[1]))
        if key not in self._lognum_cache:
            warm = self._mode_cache.get((0.0, 0.0))
            mode = _newton_mode(
                self.kf.matrix,
                self.offset,
                self.z,
                self.data.n,
                np.asarray(key),
                tol=1e-8,
                max_iter=200,
                a0=warm,
            )
            if not mode.converged and warm is not None:
                mode = _newton_mode(
                    self.kf.matrix,
                    self.offset,
                    self.z,
                    self.data.n,
                    np.asarray(key),
                    tol=1e-8,
                    max_iter=200,
                )
            if not mode.converged:
                raise ModeConvergenceError(
                    f"augmented mode search failed for weights {key}",
                    grad_norm=mode.grad_norm,
                    n_iter=mode.n_iter,
                )
            lognum = (
                float(key[0] * self.star_eta[0] + key[1] * self.star_eta[1])
                + mode.psi
                - _half_logdet_B(self.kf.matrix, mode.W)
            )
            self._lognum_cache[key] = lognum
            self._mode_cache[key] = mode.a
        mode_a = self._mode_cache[key]
        tau = self.kf.matrix @ mode_a
        return self._lognum_cache[key], tau


def _check_weights(w):
    w = np.asarray(w, dtype=float)
    if w.shape != (2,):
        raise ValueError("weights must be a 2-vector")
    if np.any(w < 0) or np.any(w != np.floor(w)):
        raise ValueError("weights must be nonnegative integers")
    return w


def latent_moment(fitted: FittedModel, Ustar, xstar, weights, data: Dataset, estar=None) -> float:
    """E[ exp(w1 (U1*'b1 + tau1*) + w2 (U2*'b2 + tau2*)) | D ] by Laplace.

    weights (0,0) returns exactly 1 (the normaliser divided by itself);
    (1,0)/(0,1) give first moments of the mixing mean, (2,0)/(0,2)
    second moments, (1,1) the cross moment.
    """
    engine = _MomentEngine(fitted, data, Ustar, xstar, estar)
    return engine.moment(weights)


def predict_mean(fitted: FittedModel, Ustar, xstar, data: Dataset, estar=None) -> np.ndarray:
    """Predictive means (E[z1*|D], E[z2*|D])."""
    engine = _MomentEngine(fitted, data, Ustar, xstar, estar)
    return np.array([engine.moment((1, 0)), engine.moment((0, 1))])


def predict_var(fitted: FittedModel, Ustar, xstar, data: Dataset, estar=None) -> np.ndarray:
    """Predictive variances: E[z*|D] plus the variance of the mixing mean."""
    engine = _MomentEngine(fitted, data, Ustar, xstar, estar)
    return _var_from_engine(engine)


def _var_from_engine(engine: _MomentEngine) -> np.ndarray:
    m = np.array([engine.moment((1, 0)), engine.moment((0, 1))])
    if engine.degenerate:
        # point-mass prior: pure Poisson, Var = mean exactly
        return m.copy()
    m2 = np.array([engine.moment((2, 0)), engine.moment((0, 2))])
    mixing = m2 - m * m
    floor = -_MOMENT_TOL * np.maximum(1.0, m * m)
    if np.any(mixing < floor):
        raise PredictionNumericsError(
            f"mixing variance {mixing} negative beyond tolerance; "
            "Laplace approximation broke down"
        )
    return m + mixing


def predict_cross_cov(fitted: FittedModel, Ustar, xstar, data: Dataset, estar=None) -> float:
    """Cov(z1*, z2* | D) = E[z1* z2*|D] - E[z1*|D] E[z2*|D].

    Exactly zero for models with no cross dependence (independent
    components, or zero shared amplitude)."""
    if not fitted.cov.has_cross_dependence:
        return 0.0
    engine = _MomentEngine(fitted, data, Ustar, xstar, estar)
    if engine.degenerate:
        return 0.0
    m11 = engine.moment((1, 1))
    m1 = engine.moment((1, 0))
    m2 = engine.moment((0, 1))
    return m11 - m1 * m2


def predict_point(fitted: FittedModel, Ustar, xstar, data: Dataset, estar=None) -> PredictionResult:
    """Full predictive summary (means, variances, cross-covariance) at one
    pair of new points."""
    engine = _MomentEngine(fitted, data, Ustar, xstar, estar)
    mean = np.array([engine.moment((1, 0)), engine.moment((0, 1))])
    var_diag = _var_from_engine(engine)
    if engine.degenerate or not fitted.cov.has_cross_dependence:
        cross = 0.0
    else:
        cross = engine.moment((1, 1)) - mean[0] * mean[1]
    var = np.array([[var_diag[0], cross], [cross, var_diag[1]]])
    modes = {
        w: engine.mode(w)
        for w in ((0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1))
    }
    return PredictionResult(mean=mean, var=var, latent_mode=modes)


def predict_batch(
    fitted: FittedModel,
    data: Dataset,
    U1s,
    U2s,
    x1s,
    x2s,
    e1s=None,
    e2s=None,
    means_only: bool = False,
):
    """Loop the single-pair prediction over m new point pairs.

    Returns a dict of arrays: mean1, mean2 and, unless `means_only`,
    var1, var2, cross.
    """
    U1s, U2s = np.atleast_2d(np.asarray(U1s, float)), np.atleast_2d(np.asarray(U2s, float))
    x1s, x2s = np.atleast_2d(np.asarray(x1s, float)), np.atleast_2d(np.asarray(x2s, float))
    m = U1s.shape[0]
    if not (U2s.shape[0] == x1s.shape[0] == x2s.shape[0] == m):
        raise ValueError("prediction arrays must have matching first dimensions")
    e1s = np.ones(m) if e1s is None else np.asarray(e1s, float)
    e2s = np.ones(m) if e2s is None else np.asarray(e2s, float)
    out = {k: np.empty(m) for k in ("mean1", "mean2")}
    if not means_only:
        out.update({k: np.empty(m) for k in ("var1", "var2", "cross")})
    for i in range(m):
        engine = _MomentEngine(
            fitted, data, (U1s[i], U2s[i]), (x1s[i], x2s[i]), (e1s[i], e2s[i])
        )
        out["mean1"][i] = engine.moment((1, 0))
        out["mean2"][i] = engine.moment((0, 1))
        if not means_only:
            var_diag = _var_from_engine(engine)
            out["var1"][i], out["var2"][i] = var_diag
            if engine.degenerate or not fitted.cov.has_cross_dependence:
                out["cross"][i] = 0.0
            else:
                out["cross"][i] = (
                    engine.moment((1, 1)) - out["mean1"][i] * out["mean2"][i]
                )
    return out
