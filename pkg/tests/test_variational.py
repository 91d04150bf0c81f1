import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, signal

from binnlab.core import InvalidParameter
from binnlab.variational import (
    VARIANCE_FLOOR,
    Granularity,
    KLMode,
    PosteriorParams,
    PriorMode,
    PriorParams,
    ScaleInit,
    elbo_regularizer,
    empirical_bayes_tau_sq,
    kl_fixed_prior,
    kl_gaussian,
    kl_per_neuron,
    kl_per_neuron_grad,
    kl_per_weight,
    kl_per_weight_grad,
    kl_per_weight_term,
    local_reparam_conv,
    local_reparam_dense,
)

means = st.floats(-10, 10)
scales = st.floats(0.05, 10)


def quad_kl(m, s, a, tau_sq):
    t = math.sqrt(tau_sq)

    def f(w):
        lq = -0.5 * ((w - m) / s) ** 2 - math.log(s)
        lp = -0.5 * ((w - a) / t) ** 2 - math.log(t)
        return math.exp(lq) / math.sqrt(2 * math.pi) * (lq - lp)

    return integrate.quad(f, m - 40 * s, m + 40 * s, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


class TestDenseReparam:
    def test_zero_input(self):
        p = PosteriorParams(np.ones((3, 4)), np.zeros(()))
        out = local_reparam_dense(p, np.zeros(4))
        np.testing.assert_array_equal(out.h_star, 0.0)
        np.testing.assert_array_equal(out.kappa_sq, VARIANCE_FLOOR)

    def test_single_active_input(self):
        m = np.zeros((2, 3))
        m[:, 1] = 2.0
        p = PosteriorParams(m, np.full((2, 3), math.log(0.5)), Granularity.PER_WEIGHT)
        out = local_reparam_dense(p, np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(out.h_star, [2.0, 2.0])
        np.testing.assert_allclose(out.kappa_sq, 0.25 + VARIANCE_FLOOR, rtol=1e-15)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        m, ls = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        x = rng.integers(0, 2, 6).astype(float)
        perm = rng.permutation(6)
        a = local_reparam_dense(PosteriorParams(m, ls, "PER_WEIGHT"), x)
        b = local_reparam_dense(PosteriorParams(m[:, perm], ls[:, perm], "PER_WEIGHT"), x[perm])
        np.testing.assert_allclose(a.h_star, b.h_star, rtol=1e-14)
        np.testing.assert_allclose(a.kappa_sq, b.kappa_sq, rtol=1e-14)

    @given(st.lists(st.sampled_from([0.0, 1.0]), min_size=5, max_size=5), st.floats(-3, 1))
    def test_per_layer_counts_active_inputs(self, bits, log_s):
        x = np.array(bits)
        p = PosteriorParams(np.ones((3, 5)), np.array(log_s))
        out = local_reparam_dense(p, x)
        np.testing.assert_allclose(out.kappa_sq, math.exp(2 * log_s) * x.sum() + VARIANCE_FLOOR, rtol=1e-14)

    def test_granularities(self):
        m = np.ones((2, 3))
        p = PosteriorParams(m, np.log([0.5, 2.0]), Granularity.PER_NEURON)
        out = local_reparam_dense(p, np.ones(3))
        np.testing.assert_allclose(out.kappa_sq, [0.75 + VARIANCE_FLOOR, 12.0 + VARIANCE_FLOOR])
        with pytest.raises(ValueError):
            PosteriorParams(m, np.zeros(3), Granularity.PER_NEURON)

    def test_rejects_bad_inputs(self):
        p = PosteriorParams(np.ones((2, 3)), np.zeros(()))
        with pytest.raises(ValueError):
            local_reparam_dense(p, np.ones(4))
        with pytest.raises(ValueError):
            local_reparam_dense(p, np.array([0.0, 0.5, 1.0]))


class TestConvReparam:
    def test_zero_map(self):
        out = local_reparam_conv(np.ones((2, 1, 3, 3)), np.ones((2, 1, 3, 3)), np.zeros((1, 1, 5, 5)), padding=1)
        np.testing.assert_array_equal(out.h_star, 0.0)
        np.testing.assert_array_equal(out.kappa_sq, VARIANCE_FLOOR)

    def test_one_by_one_kernel_is_dense(self):
        rng = np.random.default_rng(1)
        m, s = rng.normal(size=(4, 3, 1, 1)), rng.uniform(0.1, 1, (4, 3, 1, 1))
        x = rng.integers(0, 2, (2, 3, 5, 5)).astype(float)
        out = local_reparam_conv(m, s, x)
        p = PosteriorParams(m[:, :, 0, 0], np.log(s[:, :, 0, 0]), Granularity.PER_WEIGHT)
        for b in range(2):
            for i in range(5):
                for j in range(5):
                    d = local_reparam_dense(p, x[b, :, i, j])
                    np.testing.assert_allclose(out.h_star[b, :, i, j], d.h_star, rtol=1e-13)
                    np.testing.assert_allclose(out.kappa_sq[b, :, i, j], d.kappa_sq, rtol=1e-13)

    def test_delta_image_gives_flipped_kernel(self):
        k = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        img = np.zeros((1, 1, 5, 5))
        img[0, 0, 2, 2] = 1.0
        out = local_reparam_conv(k, np.ones_like(k), img, padding=1)
        np.testing.assert_allclose(out.h_star[0, 0, 1:4, 1:4], k[0, 0, ::-1, ::-1])

    def test_matches_scipy_correlation(self):
        rng = np.random.default_rng(2)
        m, s = rng.normal(size=(2, 3, 3, 3)), rng.uniform(0.1, 1, (2, 3, 3, 3))
        x = rng.integers(0, 2, (1, 3, 6, 6)).astype(float)
        out = local_reparam_conv(m, s, x, padding=1)
        for o in range(2):
            h = sum(signal.correlate2d(x[0, c], m[o, c], mode="same") for c in range(3))
            v = sum(signal.correlate2d(x[0, c], s[o, c] ** 2, mode="same") for c in range(3))
            np.testing.assert_allclose(out.h_star[0, o], h, atol=1e-12)
            np.testing.assert_allclose(out.kappa_sq[0, o], v + VARIANCE_FLOOR, atol=1e-12)


class TestKlGaussian:
    def test_examples(self):
        assert kl_gaussian(0.3, 1.2, 0.3, 1.44) == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(kl_gaussian(1.0, 1.0, 0.0, 1.0), 0.5, rtol=1e-15)
        np.testing.assert_allclose(kl_gaussian(0.0, 2.0, 0.0, 1.0), math.log(0.5) + 1.5, rtol=1e-15)
        np.testing.assert_allclose(kl_gaussian(0.0, 2.0, 0.0, 1.0), 0.8068528, atol=1e-7)
        np.testing.assert_allclose(kl_gaussian(1.0, 1.0, 0.0, 1.0), quad_kl(1.0, 1.0, 0.0, 1.0), atol=1e-10)
        np.testing.assert_allclose(kl_gaussian(0.0, 2.0, 0.0, 1.0), quad_kl(0.0, 2.0, 0.0, 1.0), atol=1e-10)

    def test_nonnegative_on_many_draws(self):
        rng = np.random.default_rng(3)
        n = 10**5
        kl = kl_gaussian(rng.normal(0, 3, n), rng.uniform(0.01, 5, n), rng.normal(0, 3, n), rng.uniform(0.01, 5, n))
        assert np.all(kl >= -1e-12)

    @given(means, scales, means, scales)
    def test_matches_quadrature(self, m, s, a, t):
        np.testing.assert_allclose(kl_gaussian(m, s, a, t * t), quad_kl(m, s, a, t * t), atol=1e-6)

    def test_rejects_bad_scales(self):
        with pytest.raises(InvalidParameter):
            kl_gaussian(0.0, 0.0, 0.0, 1.0)
        with pytest.raises(InvalidParameter):
            kl_gaussian(0.0, 1.0, 0.0, -1.0)


class TestEmpiricalBayes:
    def test_examples(self):
        assert empirical_bayes_tau_sq(0.0, 1.0) == 0.5
        assert empirical_bayes_tau_sq(1.0, 1.0) == 1.0
        assert empirical_bayes_tau_sq(3.0, 4.0) == 12.5

    @given(st.floats(-3, 3), st.floats(0.1, 3))
    def test_stated_value_is_not_the_kl_minimiser(self, m, s):
        # the KL over tau^2 is minimised at m^2 + s^2, so the stated value is never better
        best = kl_gaussian(m, s, 0.0, m * m + s * s)
        assert kl_gaussian(m, s, 0.0, empirical_bayes_tau_sq(m, s)) >= best - 1e-12
        for t in (0.5, 0.9, 1.1, 2.0):
            assert kl_gaussian(m, s, 0.0, t * (m * m + s * s)) >= best - 1e-12

    def test_fixed_prior_modes(self):
        p = PosteriorParams(np.array([[1.0, -2.0]]), np.log([[0.5, 1.5]]), Granularity.PER_WEIGHT)
        fixed = kl_fixed_prior(p, PriorParams(np.zeros(()), np.ones(())))
        np.testing.assert_allclose(fixed, kl_gaussian(1.0, 0.5, 0, 1) + kl_gaussian(-2.0, 1.5, 0, 1), rtol=1e-14)
        eb = kl_fixed_prior(p, PriorParams(np.zeros(()), np.zeros(()), PriorMode.EMPIRICAL_BAYES))
        want = sum(kl_gaussian(m, s, 0, (m * m + s * s) / 2) for m, s in ((1.0, 0.5), (-2.0, 1.5)))
        np.testing.assert_allclose(eb, want, rtol=1e-14)
        with pytest.raises(InvalidParameter):
            PriorParams(np.zeros(()), np.zeros(()))


class TestPerWeightKl:
    def test_term_examples(self):
        assert kl_per_weight_term(0.0, 3.7) == 0.0
        np.testing.assert_allclose(kl_per_weight_term(1.0, 1.0), 0.5 * math.log(2), rtol=1e-15)
        np.testing.assert_allclose(kl_per_weight_term(3.0, 1.0), 0.5 * math.log(10), rtol=1e-15)
        np.testing.assert_allclose(kl_per_weight_term(3.0, 1.0), 1.1512925, atol=1e-7)

    @given(means, scales)
    def test_printed_form_and_constant(self, m, s):
        np.testing.assert_allclose(kl_per_weight(m, s), math.log(math.sqrt(m * m + s * s) / (2 * s)), atol=1e-12)
        np.testing.assert_allclose(kl_per_weight(m, s), kl_per_weight_term(m, s) - math.log(2), atol=1e-14)

    @given(means, scales)
    def test_identity_with_gaussian_kl(self, m, s):
        ref = kl_gaussian(m, s, 0.0, m * m + s * s)
        assert abs(kl_per_weight(m, s) - (ref - math.log(2))) <= 1e-12
        assert abs(kl_per_weight_term(m, s) - ref) <= 1e-12

    @given(means, scales)
    def test_term_nonnegative_zero_only_at_zero_mean(self, m, s):
        v = kl_per_weight_term(m, s)
        assert v >= 0 and ((v == 0) == (m == 0) or abs(m / s) < 1e-7)

    @given(st.floats(-5, 5), st.floats(-2, 1))
    def test_gradient(self, m, log_s):
        d = 1e-6
        gm, gs = kl_per_weight_grad(m, math.exp(log_s))
        fm = (kl_per_weight_term(m + d, math.exp(log_s)) - kl_per_weight_term(m - d, math.exp(log_s))) / (2 * d)
        fs = (kl_per_weight_term(m, math.exp(log_s + d)) - kl_per_weight_term(m, math.exp(log_s - d))) / (2 * d)
        np.testing.assert_allclose([gm, gs], [fm, fs], atol=1e-7)


class TestPerNeuronKl:
    def test_examples(self):
        assert kl_per_neuron(0.0, 2.0) == 0.0
        np.testing.assert_allclose(kl_per_neuron(1.0, 1.0), 0.3465736, atol=1e-7)

    @given(st.floats(-5, 5), st.floats(0.1, 5), st.floats(0.01, 100))
    def test_ratio_invariance(self, h, k, c):
        np.testing.assert_allclose(kl_per_neuron(c * h, c * k), kl_per_neuron(h, k), rtol=1e-12, atol=1e-15)

    @given(st.floats(-5, 5), st.floats(0.1, 5))
    def test_gradient(self, h, k):
        d = 1e-6
        gh, gk = kl_per_neuron_grad(h, k)
        np.testing.assert_allclose(gh, (kl_per_neuron(h + d, k) - kl_per_neuron(h - d, k)) / (2 * d), atol=1e-6)
        np.testing.assert_allclose(gk, (kl_per_neuron(h, k + d) - kl_per_neuron(h, k - d)) / (2 * d), atol=1e-6)


class TestElboRegularizer:
    def test_lambda_zero(self):
        terms = [(np.ones((2, 2)), np.ones((2, 2)))]
        assert elbo_regularizer(terms, None, KLMode.PER_WEIGHT, 0.0) == 0.0
        assert elbo_regularizer(terms, [np.ones((3, 2))], KLMode.PER_NEURON, 0.0) == 0.0

    def test_single_weight(self):
        val = elbo_regularizer([(np.array([1.0]), np.array([1.0]))], None, KLMode.PER_WEIGHT, 1.0)
        np.testing.assert_allclose(val, 0.3465736, atol=1e-7)

    def test_dead_layer_per_neuron(self):
        assert elbo_regularizer([], [np.zeros((4, 3))], KLMode.PER_NEURON, 1.0) == 0.0

    def test_per_neuron_batch_average(self):
        ratios = np.array([[1.0, 0.0], [3.0, 0.0]])
        want = (0.5 * math.log(2) + 0.5 * math.log(10)) / 2
        np.testing.assert_allclose(elbo_regularizer([], [ratios], KLMode.PER_NEURON, 1.0), want, rtol=1e-14)
        with pytest.raises(ValueError):
            elbo_regularizer([], None, KLMode.PER_NEURON, 1.0)

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 3))
    def test_monotone_in_abs_mean(self, m, idx, bump):
        m = np.array(m)
        s = np.full(3, 0.7)
        bigger = m.copy()
        bigger[idx] = math.copysign(abs(m[idx]) + bump, m[idx])
        a = elbo_regularizer([(m, s)], None, KLMode.PER_WEIGHT, 0.5)
        b = elbo_regularizer([(bigger, s)], None, KLMode.PER_WEIGHT, 0.5)
        assert b >= a


def test_scale_init():
    assert ScaleInit()(16) == 0.125
    assert ScaleInit(1.0)(4) == 0.5
