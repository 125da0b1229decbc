"""Mode finding, Laplace marginal likelihood, and the empirical-Bayes fit."""

import math

import numpy as np
import pytest
from scipy.integrate import dblquad
from scipy.optimize import minimize, minimize_scalar

import mcgpp.inference as inference
from mcgpp.covariance import MCGPHyperparams, assemble_K, chol_psd
from mcgpp.inference import (
    MODEL_SPECS,
    FitError,
    FittedModel,
    ModelSpec,
    OptimOptions,
    _laplace_from_gram,
    _Transform,
    aic,
    find_mode,
    fit,
    laplace_marginal_loglik,
)
from mcgpp.kernels import CovFamily, KernelParams
from mcgpp.likelihood import Dataset, RegressionCoefficients, phi, phi_grad_W, poisson_logpmf
from mcgpp.simulation import gen_scenario1

SQ = CovFamily.SQUARED_EXPONENTIAL


def toy_dataset(z=(1, 1)):
    return Dataset(z1=[z[0]], U1=[[1.0]], x1=[[0.0]], z2=[z[1]], U2=[[1.0]], x2=[[5.0]])


def uniform_theta(v, a=1.0):
    kp = KernelParams(v=v, A=a)
    return MCGPHyperparams(SQ, kp, kp, SQ, kp, SQ, kp)


def random_tiny_instance(rng, vmax=1.0):
    c1, c2 = rng.normal(size=2) * 0.8
    theta = uniform_theta(v=float(rng.uniform(0.2, vmax)), a=float(rng.uniform(0.5, 2.0)))
    ds_probe = Dataset(z1=[0], U1=[[1.0]], x1=[[0.0]], z2=[0], U2=[[1.0]], x2=[[1.0]])
    K = assemble_K(ds_probe.inputs, theta)
    L = np.linalg.cholesky(K + 1e-12 * np.eye(2))
    tau = L @ rng.standard_normal(2)
    z1 = rng.poisson(math.exp(c1 + tau[0]))
    z2 = rng.poisson(math.exp(c2 + tau[1]))
    ds = Dataset(z1=[z1], U1=[[1.0]], x1=[[0.0]], z2=[z2], U2=[[1.0]], x2=[[1.0]])
    beta = RegressionCoefficients([c1], [c2])
    return ds, beta, theta, K


def exact_marginal_dblquad(ds, beta, K):
    """Brute-force 2-d quadrature of the marginal likelihood for n1 = n2 = 1."""
    c = ds.linear_predictor(beta)
    z = ds.counts
    Kinv = np.linalg.inv(K)
    norm = 1.0 / (2 * math.pi * math.sqrt(np.linalg.det(K)))

    def integrand(t2, t1):
        t = np.array([t1, t2])
        ll = z[0] * (c[0] + t1) - math.exp(c[0] + t1) - math.lgamma(z[0] + 1)
        ll += z[1] * (c[1] + t2) - math.exp(c[1] + t2) - math.lgamma(z[1] + 1)
        return math.exp(ll - 0.5 * float(t @ (Kinv @ t))) * norm

    sd = math.sqrt(np.max(np.diag(K)))
    lim = max(8.0 * sd, 4.0)
    val, err = dblquad(integrand, -lim, lim, -lim, lim, epsabs=1e-12, epsrel=1e-9)
    assert val > 0
    return math.log(val)


class TestFindMode:
    def test_stationary_at_zero(self):
        ds = toy_dataset()
        beta = RegressionCoefficients([0.0], [0.0])
        cf = chol_psd(np.eye(2))
        mode = find_mode(ds, beta, cf)
        np.testing.assert_array_equal(mode.tau, np.zeros(2))
        assert mode.converged and mode.n_iter == 0

    def test_zero_counts_bounded_by_prior(self):
        ds = toy_dataset(z=(0, 0))
        beta = RegressionCoefficients([0.5], [0.5])
        theta = uniform_theta(v=1.0)
        kf = chol_psd(assemble_K(ds.inputs, theta))
        mode = find_mode(ds, beta, kf)
        assert mode.converged
        assert np.all(mode.tau < 0)  # pushes the mean down
        assert np.all(mode.tau > -10)  # but the prior keeps it finite
        g, _ = phi_grad_W(mode.tau, ds, beta, kf)
        assert np.max(np.abs(g)) < 1e-7
        # coordinate-wise golden-section oracle
        tau = mode.tau.copy()
        for _ in range(60):
            for i in range(2):
                def f(t, i=i):
                    tt = tau.copy()
                    tt[i] = t
                    return -phi(tt, ds, beta, kf)
                tau[i] = minimize_scalar(f, bracket=(-5, 0, 5), method="golden", options={"xtol": 1e-12}).x
        np.testing.assert_allclose(mode.tau, tau, atol=1e-6)

    def test_against_bfgs_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            ds, beta, theta, _ = _random_small(rng)
            kf = chol_psd(assemble_K(ds.inputs, theta))
            mode = find_mode(ds, beta, kf)
            assert mode.converged
            res = minimize(
                lambda t: -phi(t, ds, beta, kf),
                np.zeros(ds.n),
                jac=lambda t: -phi_grad_W(t, ds, beta, kf)[0],
                method="BFGS",
                options={"gtol": 1e-11, "maxiter": 500},
            )
            np.testing.assert_allclose(mode.tau, res.x, atol=1e-6)

    def test_monotone_psi_trace(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            ds, beta, theta, _ = _random_small(rng)
            kf = chol_psd(assemble_K(ds.inputs, theta))
            mode = find_mode(ds, beta, kf)
            trace = np.asarray(mode.psi_trace)
            assert np.all(np.diff(trace) >= -1e-9 * (1.0 + np.abs(trace[:-1])))

    def test_tolerance_validation(self):
        ds = toy_dataset()
        with pytest.raises(ValueError):
            find_mode(ds, RegressionCoefficients([0.0], [0.0]), chol_psd(np.eye(2)), tol=0.0)


def _random_small(rng):
    n1, n2 = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    theta = uniform_theta(v=float(rng.uniform(0.3, 1.2)), a=float(rng.uniform(0.5, 2.0)))
    x1 = rng.uniform(-3, 3, (n1, 1))
    x2 = rng.uniform(-3, 3, (n2, 1))
    U1 = np.column_stack([np.ones(n1), rng.normal(size=n1)])
    U2 = np.column_stack([np.ones(n2), rng.normal(size=n2)])
    beta = RegressionCoefficients(rng.normal(size=2) * 0.5, rng.normal(size=2) * 0.5)
    mu1 = np.exp(np.clip(U1 @ beta.b1, -4, 4))
    mu2 = np.exp(np.clip(U2 @ beta.b2, -4, 4))
    ds = Dataset(z1=rng.poisson(mu1), U1=U1, x1=x1, z2=rng.poisson(mu2), U2=U2, x2=x2)
    return ds, beta, theta, None


class TestLaplaceMarginal:
    def test_canonical_value(self):
        ds = toy_dataset()
        beta = RegressionCoefficients([0.0], [0.0])
        ll, mode, kf = _laplace_from_gram(np.eye(2), ds, beta, 1e-8, 50)
        assert ll == pytest.approx(-2.0 - math.log(2.0), rel=1e-12)

    def test_against_quadrature(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            ds, beta, theta, K = random_tiny_instance(rng)
            ll, _, _ = _laplace_from_gram(K, ds, beta, 1e-10, 100)
            exact = exact_marginal_dblquad(ds, beta, K)
            assert abs(ll - exact) < 0.1

    def test_vanishing_amplitude_limit(self):
        ds = toy_dataset(z=(2, 3))
        beta = RegressionCoefficients([0.3], [-0.2])
        eta = ds.linear_predictor(beta)
        pointmass = float(np.sum(poisson_logpmf(ds.counts, eta, ds.log_exposure)))
        ll_small = laplace_marginal_loglik(beta, uniform_theta(v=1e-6), ds)
        assert ll_small == pytest.approx(pointmass, abs=1e-6)
        ll_zero = laplace_marginal_loglik(beta, uniform_theta(v=0.0), ds)
        assert ll_zero == pointmass

    def test_jitter_level_continuity(self):
        # forcing the next jitter level moves the value and its numerical
        # gradient by less than 1e-3
        rng = np.random.default_rng(3)
        ds, beta, theta, _ = _random_small(rng)
        K = assemble_K(ds.inputs, theta)
        scale = float(np.mean(np.diag(K)))
        ll0, _, _ = _laplace_from_gram(K, ds, beta, 1e-9, 100)
        ll1, _, _ = _laplace_from_gram(K + 1e-6 * scale * np.eye(ds.n), ds, beta, 1e-9, 100)
        assert abs(ll0 - ll1) < 1e-3

        def grad_wrt_amplitude(jitter):
            h = 1e-4
            out = []
            for dv in (+h, -h):
                kp = KernelParams(v=theta.xi1.v * math.exp(dv / 2), A=theta.xi1.A)
                th = MCGPHyperparams(SQ, kp, kp, SQ, theta.eta1, SQ, theta.eta2)
                Kh = assemble_K(ds.inputs, th) + jitter * scale * np.eye(ds.n)
                out.append(_laplace_from_gram(Kh, ds, beta, 1e-9, 100)[0])
            return (out[0] - out[1]) / (2 * h)

        assert abs(grad_wrt_amplitude(0.0) - grad_wrt_amplitude(1e-6)) < 1e-3


class TestAic:
    def test_arithmetic_convention(self):
        m = _stub_model(loglik=-697.911, n_params=2)
        assert aic(m) == pytest.approx(1399.822, abs=1e-9)

    def test_zero(self):
        assert aic(_stub_model(loglik=0.0, n_params=0)) == 0.0

    def test_one_extra_parameter_adds_two(self):
        a = aic(_stub_model(loglik=-10.0, n_params=3))
        b = aic(_stub_model(loglik=-10.0, n_params=4))
        assert b - a == pytest.approx(2.0, abs=1e-12)


def _stub_model(loglik, n_params):
    return FittedModel(
        kind="mcgpp",
        beta=RegressionCoefficients([0.0], [0.0]),
        theta=None,
        cov=None,
        tau0=np.zeros(2),
        kfactor=None,
        loglik=loglik,
        n_params=n_params,
        converged=True,
        n_iter=0,
    )


class TestFit:
    def test_zero_steps_returns_initialisation(self):
        draw = gen_scenario1(6, 6, seed=0, n_test=4)
        opts = OptimOptions(max_iter=0, n_starts=1, seed=0)
        fitted = fit(draw.train, MODEL_SPECS["model4"], opts)
        assert not fitted.converged
        assert fitted.n_iter == 0
        tr = _Transform(MODEL_SPECS["model4"], 2, 2, 1)
        x0 = tr.initial(draw.train)
        b0, _ = tr.unpack(x0)
        np.testing.assert_allclose(fitted.beta.b1, b0.b1, rtol=1e-12)

    def test_beta_recovery_within_posterior_width(self):
        draw = gen_scenario1(20, 20, seed=5)
        opts = OptimOptions(max_iter=60, n_starts=1, seed=0)
        fitted = fit(draw.train, MODEL_SPECS["model1"], opts)
        est = np.concatenate([fitted.beta.b1, fitted.beta.b2])
        # posterior width at this design scale is roughly 0.25 per
        # coefficient (latent-field confounding dominates)
        assert np.all(np.abs(est - np.array([1, 2, 1, 2])) < 0.75)

    def test_glm_limit_with_no_latent_field(self):
        statsmodels = pytest.importorskip("statsmodels.api")
        draw = gen_scenario1(60, 60, seed=2, amplitude_scale=0.0)
        opts = OptimOptions(max_iter=60, n_starts=1, seed=0)
        fitted = fit(draw.train, MODEL_SPECS["model4"], opts)
        glm1 = statsmodels.GLM(
            np.asarray(draw.train.z1), draw.train.U1, family=statsmodels.families.Poisson()
        ).fit()
        glm2 = statsmodels.GLM(
            np.asarray(draw.train.z2), draw.train.U2, family=statsmodels.families.Poisson()
        ).fit()
        np.testing.assert_allclose(fitted.beta.b1, glm1.params, atol=0.05)
        np.testing.assert_allclose(fitted.beta.b2, glm2.params, atol=0.05)

    def test_deterministic(self):
        draw = gen_scenario1(8, 8, seed=3, n_test=4)
        opts = OptimOptions(max_iter=15, n_starts=2, seed=11)
        a = fit(draw.train, MODEL_SPECS["model4"], opts)
        b = fit(draw.train, MODEL_SPECS["model4"], opts)
        assert a.loglik == b.loglik
        np.testing.assert_array_equal(a.tau0, b.tau0)

    def test_refit_from_optimum_is_stable(self):
        draw = gen_scenario1(10, 10, seed=4, n_test=4)
        opts = OptimOptions(max_iter=120, n_starts=1, seed=0)
        fitted = fit(draw.train, MODEL_SPECS["model4"], opts)
        # consistency of the reported optimum
        ll = laplace_marginal_loglik(fitted.beta, fitted.theta, draw.train)
        assert ll == pytest.approx(fitted.loglik, abs=1e-9)
        # re-optimising from the found optimum barely moves the value
        tr = _Transform(MODEL_SPECS["model4"], 2, 2, 1)
        x_opt = tr.pack(fitted.beta, fitted.theta)

        def nll(x):
            b, t = tr.unpack(x)
            try:
                return -laplace_marginal_loglik(b, t, draw.train)
            except Exception:
                return 1e13

        res = minimize(
            nll, x_opt, method="L-BFGS-B", jac="3-point", bounds=tr.bounds,
            options={"maxiter": 50, "ftol": 1e-11},
        )
        assert -res.fun - fitted.loglik < 1e-6
        assert abs(nll(x_opt) + fitted.loglik) < 1e-9

    def test_free_shapes_are_searchable(self):
        draw = gen_scenario1(8, 8, seed=6, n_test=4)
        spec = ModelSpec(
            shared_family=SQ,
            eta1_family=SQ,
            eta2_family=CovFamily.GAMMA_EXPONENTIAL,
            free_shapes=True,
        )
        opts = OptimOptions(max_iter=10, n_starts=1, seed=0)
        fitted = fit(draw.train, spec, opts)
        assert fitted.n_params == 4 + 4 * 2 + 1  # betas + 4 kernel blocks + gamma slot
        assert 0.0 < fitted.theta.eta2.gamma <= 2.0

    def test_all_starts_fail_raises(self, monkeypatch):
        draw = gen_scenario1(6, 6, seed=7, n_test=4)

        def boom(*args, **kwargs):
            raise np.linalg.LinAlgError("forced failure")

        monkeypatch.setattr(inference, "_laplace_from_gram", boom)
        with pytest.raises(FitError) as err:
            fit(draw.train, MODEL_SPECS["model4"], OptimOptions(max_iter=5, n_starts=2, seed=0))
        assert len(err.value.diagnostics) == 2

    def test_spec_dimension_check(self):
        draw = gen_scenario1(6, 6, seed=8, n_test=4)
        spec = ModelSpec(q1=3)
        with pytest.raises(ValueError):
            fit(draw.train, spec, OptimOptions(max_iter=1, n_starts=1))
