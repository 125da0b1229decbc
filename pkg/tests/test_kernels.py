"""Kernel-level checks: closed forms against the defining convolution
integral, exact symmetries, and family normalisation conventions."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from mcgpp.kernels import (
    CovFamily,
    KernelParams,
    cov_cross_general,
    cov_cross_family,
    cov_cross_sqexp,
    cov_iso,
    cov_self_sqexp,
    quad_form,
)

SQRT_PI = math.sqrt(math.pi)
FAMILIES = list(CovFamily)


def conv_integral_1d(d, va, Aa, vb, Ab):
    """Defining integral of the shared-noise covariance: two Gaussian
    smoothing kernels against the same white noise."""

    def f(u):
        return va * math.exp(-0.5 * Aa * u * u) * vb * math.exp(-0.5 * Ab * (u - d) ** 2)

    val, err = quad(f, -50.0, 50.0, epsabs=1e-13, epsrel=1e-13)
    assert err < 1e-9
    return val


def mc_conv_integral_1d(d, va, Aa, vb, Ab, n=1_000_000, seed=123):
    """Monte-Carlo version of the same integral (uniform proposal)."""
    rng = np.random.default_rng(seed)
    half = 12.0
    u = rng.uniform(-half, half, size=n)
    f = va * np.exp(-0.5 * Aa * u * u) * vb * np.exp(-0.5 * Ab * (u - d) ** 2)
    vals = f * (2.0 * half)
    return float(np.mean(vals)), float(np.std(vals) / math.sqrt(n))


class TestQuadForm:
    def test_zero_displacement(self):
        assert quad_form(0.0, 1.0, 1.0) == 0.0

    def test_scalar_value(self):
        # d^2 * Aa Ab / (Aa + Ab) for p = 1
        assert quad_form(2.0, 1.0, 1.0) == pytest.approx(2.0, rel=1e-12)

    def test_dense_solve_oracle(self):
        d = np.array([1.0, 1.0])
        got = quad_form(d, np.eye(2), np.eye(2))
        x = np.linalg.solve(np.eye(2) + np.eye(2), np.eye(2) @ d)
        assert got == pytest.approx(float(d @ (np.eye(2) @ x)), rel=1e-12)
        assert got == pytest.approx(1.0, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            quad_form(np.array([1.0, 2.0]), np.eye(2), np.eye(3))

    def test_not_pd(self):
        with pytest.raises(np.linalg.LinAlgError):
            quad_form(1.0, -1.0, 0.5)

    @given(st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_swap_negate_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(1, 4))
        d = rng.normal(size=p) * 3
        Aa = _random_spd(rng, p)
        Ab = _random_spd(rng, p)
        assert quad_form(d, Aa, Ab) == quad_form(-d, Ab, Aa)

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(1, 4))
        assert quad_form(rng.normal(size=p) * 5, _random_spd(rng, p), _random_spd(rng, p)) >= 0.0


def _random_spd(rng, p):
    M = rng.normal(size=(p, p))
    return M @ M.T + (0.1 + rng.uniform()) * np.eye(p)


def _random_kernel(rng, p, family=CovFamily.SQUARED_EXPONENTIAL):
    kwargs = {}
    if family is CovFamily.MATERN:
        kwargs["nu"] = float(rng.uniform(0.3, 5.0))
    elif family is CovFamily.GAMMA_EXPONENTIAL:
        kwargs["gamma"] = float(rng.uniform(0.1, 2.0))
    elif family is CovFamily.RATIONAL_QUADRATIC:
        kwargs["alpha"] = float(np.exp(rng.uniform(-1.5, 2.3)))
    return KernelParams(
        v=float(np.exp(rng.uniform(-2, 1))),
        A=np.diag(np.exp(rng.uniform(-2, 2, size=p))),
        **kwargs,
    )


class TestSqExpSelf:
    def test_zero_lag(self):
        assert cov_self_sqexp(0.0, KernelParams(v=1.0, A=1.0)) == pytest.approx(SQRT_PI, rel=1e-14)

    def test_at_two(self):
        assert cov_self_sqexp(2.0, KernelParams(v=1.0, A=1.0)) == pytest.approx(
            SQRT_PI * math.exp(-1.0), rel=1e-14
        )

    def test_simulation_amplitude(self):
        assert cov_self_sqexp(0.0, KernelParams(v=0.2, A=1.0)) == pytest.approx(
            0.04 * SQRT_PI, rel=1e-14
        )

    def test_convolution_quadrature(self):
        for d in (0.0, 0.7, 2.0):
            for v, a in ((1.0, 1.0), (0.2, 1.0), (0.5, 2.3)):
                expected = conv_integral_1d(d, v, a, v, a)
                assert cov_self_sqexp(d, KernelParams(v=v, A=a)) == pytest.approx(
                    expected, rel=1e-9
                )

    def test_convolution_monte_carlo(self):
        est, se = mc_conv_integral_1d(2.0, 1.0, 1.0, 1.0, 1.0)
        closed = cov_self_sqexp(2.0, KernelParams(v=1.0, A=1.0))
        assert abs(closed - est) < 3.0 * se


class TestSqExpCross:
    def test_equal_kernels_zero_lag(self):
        kp = KernelParams(v=1.0, A=1.0)
        assert cov_cross_sqexp(0.0, kp, kp) == pytest.approx(SQRT_PI, rel=1e-12)

    def test_equal_kernels_mc_oracle(self):
        kp = KernelParams(v=1.0, A=1.0)
        est, se = mc_conv_integral_1d(2.0, 1.0, 1.0, 1.0, 1.0, seed=7)
        assert abs(cov_cross_sqexp(2.0, kp, kp) - est) < 3.0 * se

    def test_mixed_kernels_quadrature(self):
        # value computed by the independent quadrature oracle, frozen here
        pa = KernelParams(v=1.0, A=1.0)
        pb = KernelParams(v=2.0, A=3.0)
        expected = conv_integral_1d(1.0, 1.0, 1.0, 2.0, 3.0)
        got = cov_cross_sqexp(1.0, pa, pb)
        assert got == pytest.approx(expected, rel=1e-10)
        assert got == pytest.approx(1.7227787390681992, rel=1e-12)

    def test_reduction_to_self(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = int(rng.integers(1, 3))
            kp = _random_kernel(rng, p)
            d = rng.normal(size=p) * 3
            assert cov_cross_sqexp(d, kp, kp) == pytest.approx(
                cov_self_sqexp(d, kp), rel=1e-12
            )

    def test_exact_exchange_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = int(rng.integers(1, 3))
            pa, pb = _random_kernel(rng, p), _random_kernel(rng, p)
            d = rng.normal(size=p) * 4
            assert cov_cross_sqexp(d, pa, pb) == cov_cross_sqexp(-d, pb, pa)


class TestIsoFamilies:
    def test_gamma_zero_lag(self):
        kp = KernelParams(v=0.2, A=1.0, gamma=1.0)
        assert cov_iso(CovFamily.GAMMA_EXPONENTIAL, 0.0, kp) == pytest.approx(
            0.04 * SQRT_PI, rel=1e-14
        )

    def test_rq_zero_lag_matches_sqexp(self):
        kp = KernelParams(v=0.7, A=2.0, alpha=1.3)
        assert cov_iso(CovFamily.RATIONAL_QUADRATIC, 0.0, kp) == pytest.approx(
            cov_self_sqexp(0.0, kp), rel=1e-14
        )

    def test_matern_half_is_exponential(self):
        a = 1.7
        kp = KernelParams(v=1.0, A=a, nu=0.5)
        ell = math.sqrt(2.0 / a)
        k0 = cov_iso(CovFamily.MATERN, 0.0, kp)
        for d in (0.3, 1.0, 2.5):
            ratio = cov_iso(CovFamily.MATERN, d, kp) / k0
            assert ratio == pytest.approx(math.exp(-abs(d) / ell), rel=1e-9)

    def test_gamma_two_is_sqexp(self):
        kp2 = KernelParams(v=0.5, A=1.4, gamma=2.0)
        for d in (0.0, 0.5, 1.0, 3.0):
            assert cov_iso(CovFamily.GAMMA_EXPONENTIAL, d, kp2) == pytest.approx(
                cov_iso(CovFamily.SQUARED_EXPONENTIAL, d, kp2), rel=1e-12
            )

    def test_gamma_continuity_toward_two(self):
        kp = KernelParams(v=0.5, A=1.4)
        for d in (0.5, 1.5):
            sq = cov_iso(CovFamily.SQUARED_EXPONENTIAL, d, kp)
            prev = None
            for g in (1.9, 1.99, 1.999):
                kpg = KernelParams(v=0.5, A=1.4, gamma=g)
                gap = abs(cov_iso(CovFamily.GAMMA_EXPONENTIAL, d, kpg) - sq)
                if prev is not None:
                    assert gap < prev
                prev = gap
            assert prev < 1e-3

    def test_missing_shape_uses_default(self):
        kp = KernelParams(v=1.0, A=1.0)
        kp_explicit = KernelParams(v=1.0, A=1.0, nu=1.5)
        assert cov_iso(CovFamily.MATERN, 1.0, kp) == cov_iso(
            CovFamily.MATERN, 1.0, kp_explicit
        )

    @pytest.mark.parametrize("family", FAMILIES)
    def test_decay_bounded_by_zero_lag(self, family):
        rng = np.random.default_rng(hash(family.value) % 2**32)
        for _ in range(250):
            p = int(rng.integers(1, 3))
            kp = _random_kernel(rng, p, family)
            d = rng.normal(size=p) * rng.uniform(0, 8)
            assert cov_iso(family, d, kp) <= cov_iso(family, np.zeros(p), kp) + 1e-15

    @pytest.mark.parametrize("family", FAMILIES)
    def test_even_in_displacement(self, family):
        rng = np.random.default_rng(hash(family.value) % 2**31)
        for _ in range(100):
            p = int(rng.integers(1, 3))
            kp = _random_kernel(rng, p, family)
            d = rng.normal(size=p) * 3
            assert cov_iso(family, d, kp) == cov_iso(family, -d, kp)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_family_reduction_cross_equals_self(self, family):
        rng = np.random.default_rng(42)
        for _ in range(50):
            kp = _random_kernel(rng, 1, family)
            d = rng.normal() * 3
            assert cov_cross_family(family, d, kp, kp) == pytest.approx(
                cov_iso(family, d, kp), rel=1e-12
            )


class TestCrossGeneral:
    def test_sqexp_base_reduction(self):
        rng = np.random.default_rng(3)
        base = lambda m: np.exp(-0.5 * m * m)
        for _ in range(50):
            p = int(rng.integers(1, 3))
            pa, pb = _random_kernel(rng, p), _random_kernel(rng, p)
            d = rng.normal(size=p) * 2
            assert cov_cross_general(base, d, pa, pb) == cov_cross_sqexp(d, pa, pb)

    def test_constant_base_zero_lag(self):
        pa = KernelParams(v=0.5, A=0.8)
        pb = KernelParams(v=1.5, A=1.2)
        got = cov_cross_general(lambda m: np.ones_like(np.asarray(m)), 0.0, pa, pb)
        expected = math.sqrt(2 * math.pi) * 0.5 * 1.5 / math.sqrt(2.0)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_exponential_base_value(self):
        kp = KernelParams(v=1.0, A=1.0)
        got = cov_cross_general(lambda m: np.exp(-m), 1.0, kp, kp)
        assert got == pytest.approx(SQRT_PI * math.exp(-math.sqrt(0.5)), rel=1e-12)


class TestKernelParamsValidation:
    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            KernelParams(v=1.0, A=np.array([[1.0, 0.5], [0.2, 1.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            KernelParams(v=1.0, A=np.array([[1.0, 2.0], [2.0, 1.0]]))

    @pytest.mark.parametrize(
        "kwargs", [{"nu": 0.0}, {"nu": -1.0}, {"gamma": 0.0}, {"gamma": 2.5}, {"alpha": -0.1}]
    )
    def test_rejects_bad_shapes(self, kwargs):
        with pytest.raises(ValueError):
            KernelParams(v=1.0, A=1.0, **kwargs)

    def test_accepts_full_matrix(self):
        A = np.array([[2.0, 0.3], [0.3, 1.0]])
        kp = KernelParams(v=1.0, A=A)
        assert kp.dim == 2
        assert cov_self_sqexp(np.array([0.5, -0.2]), kp) > 0

    def test_shared_pair_shape_disagreement(self):
        pa = KernelParams(v=1.0, A=1.0, gamma=1.0)
        pb = KernelParams(v=1.0, A=1.0, gamma=1.5)
        with pytest.raises(ValueError):
            cov_cross_family(CovFamily.GAMMA_EXPONENTIAL, 1.0, pa, pb)
