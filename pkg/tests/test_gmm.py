import math

import numpy as np
import pytest

from deepgmm.errors import DimensionMismatch, EmptyComponent, TooFewPixels
from deepgmm.gmm import (
    DiagGaussian,
    EMOptions,
    MixtureParams,
    e_step,
    em_fit,
    log_density,
    m_step,
    nll,
    random_init,
    rescue_components,
)
from deepgmm.image import PixelDomain, ResponsibilityField

from conftest import image_from


def naive_nll(x, weights, means, var):
    """Direct density sum in extended precision, no log-sum-exp."""
    total = np.longdouble(0)
    for xi in x:
        s = np.longdouble(0)
        for w, mu, v in zip(weights, means, var):
            d = (xi - mu).astype(np.longdouble)
            s += np.longdouble(w) * np.prod(np.exp(-0.5 * d * d / v) / np.sqrt(2 * np.pi * v.astype(np.longdouble)))
        total += np.log(s)
    return float(-total / len(x))


class TestLogDensity:
    def test_standard_normal_at_mean(self):
        assert log_density(DiagGaussian([0.0], [1.0]), [0.0]) == pytest.approx(-0.918939, abs=1e-6)

    def test_bivariate(self):
        assert log_density(DiagGaussian([0, 0], [1, 1]), [0, 0]) == pytest.approx(-1.837877, abs=1e-6)

    def test_hand_value(self):
        assert log_density(DiagGaussian([1.0], [4.0]), [3.0]) == pytest.approx(-2.112086, abs=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            log_density(DiagGaussian([0.0], [1.0]), [0.0, 1.0])


class TestNLL:
    def test_single_pixel(self):
        p = MixtureParams([1.0], [[0.0]], [[1.0]])
        assert nll(image_from([[0.0]]), p) == pytest.approx(0.918939, abs=1e-6)

    def test_duplicate_components(self, rng):
        img = image_from(rng.normal(size=(1, 3, 3)))
        one = MixtureParams([1.0], [[0.3]], [[2.0]])
        two = MixtureParams([0.4, 0.6], [[0.3], [0.3]], [[2.0], [2.0]])
        assert nll(img, two) == pytest.approx(nll(img, one), abs=1e-12)

    def test_matches_naive_sum(self, rng):
        img = image_from(rng.normal(size=(2, 2, 4)))
        p = MixtureParams([0.2, 0.5, 0.3], rng.normal(size=(3, 2)), rng.uniform(0.5, 2, size=(3, 2)))
        assert nll(img, p) == pytest.approx(naive_nll(img.pixels, p.weights, p.means, p.var), abs=1e-9)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionMismatch):
            nll(image_from([[0.0]]), MixtureParams([1.0], [[0.0, 0.0]], [[1.0, 1.0]]))

    def test_permutation_invariant(self, rng):
        img = image_from(rng.normal(size=(1, 4, 4)))
        p = MixtureParams([0.2, 0.5, 0.3], rng.normal(size=(3, 1)), rng.uniform(0.5, 2, size=(3, 1)))
        assert nll(img, p.permuted([2, 0, 1])) == nll(img, p)


class TestEStep:
    def test_symmetric(self):
        p = MixtureParams([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]])
        np.testing.assert_allclose(e_step(image_from([[0.0]]), p).weights, [[0.5, 0.5]])

    def test_zero_prior(self):
        p = MixtureParams([1.0, 0.0], [[5.0], [0.0]], [[1.0], [1.0]])
        np.testing.assert_array_equal(e_step(image_from([[0.0]]), p).weights, [[1.0, 0.0]])

    def test_logistic_value(self):
        p = MixtureParams([0.5, 0.5], [[0.0], [2.0]], [[1.0], [1.0]])
        w = e_step(image_from([[0.0]]), p).weights
        np.testing.assert_allclose(w, [[0.880797, 0.119203]], atol=1e-6)
        assert w[0, 0] == pytest.approx(1 / (1 + math.exp(-2.0)), abs=1e-12)

    def test_matches_direct_bayes(self, rng):
        img = image_from(rng.normal(size=(2, 3, 3)))
        p = MixtureParams([0.3, 0.7], rng.normal(size=(2, 2)), rng.uniform(0.5, 2, size=(2, 2)))
        dens = np.stack([
            np.prod(np.exp(-0.5 * (img.pixels - mu) ** 2 / v) / np.sqrt(2 * np.pi * v), axis=1)
            for mu, v in zip(p.means, p.var)
        ], axis=1) * p.weights
        np.testing.assert_allclose(e_step(img, p).weights, dens / dens.sum(1, keepdims=True), atol=1e-9)


class TestMStep:
    def test_four_pixel_oracle(self):
        img = image_from([[0.0, 1.0, 2.0, 3.0]])
        w = ResponsibilityField(img.domain, [[1, 0], [1, 0], [0, 1], [0, 1]])
        p = m_step(img, w)
        np.testing.assert_allclose(p.means[:, 0], [0.5, 2.5])
        np.testing.assert_allclose(p.var[:, 0], [0.25, 0.25])
        np.testing.assert_allclose(p.weights, [0.5, 0.5])

    def test_uniform_responsibilities(self, rng):
        img = image_from(rng.normal(size=(2, 3, 4)))
        w = ResponsibilityField(img.domain, np.full((12, 3), 1 / 3))
        p = m_step(img, w)
        np.testing.assert_allclose(p.means, np.tile(img.pixels.mean(0), (3, 1)), atol=1e-12)
        np.testing.assert_allclose(p.weights, 1 / 3)

    def test_empty_component(self):
        img = image_from([[0.0, 1.0]])
        w = ResponsibilityField(img.domain, [[1, 0], [1, 0]])
        with pytest.raises(EmptyComponent) as info:
            m_step(img, w)
        assert info.value.components == (1,)

    def test_var_floor(self):
        img = image_from([[2.0, 2.0, 5.0]])
        w = ResponsibilityField(img.domain, [[1, 0], [1, 0], [0, 1]])
        p = m_step(img, w)
        np.testing.assert_allclose(p.var[:, 0], [1e-6, 1e-6])


class TestEMFit:
    def test_far_clusters(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(0, 0.1, 200), rng.normal(100, 0.1, 200)])
        img = image_from(x.reshape(1, 20, 20))
        # uniform pixel picks land in the same cluster half the time; restarts fix that
        fit = em_fit(img, 2, seed=0, opts=EMOptions(n_init=10))
        np.testing.assert_allclose(np.sort(fit.params.means[:, 0]), [0, 100], atol=0.05)

    def test_single_component_closed_form(self, rng):
        img = image_from(rng.normal(2.0, 3.0, size=(1, 6, 6)))
        fit = em_fit(img, 1, seed=0)
        x = img.pixels[:, 0]
        np.testing.assert_allclose(fit.params.means[0], [x.mean()])
        np.testing.assert_allclose(fit.params.var[0], [x.var()])
        closed = 0.5 * math.log(2 * math.pi * x.var()) + 0.5
        assert fit.nll_trace[-1] == pytest.approx(closed, abs=1e-12)

    def test_trace_monotone(self, rng):
        img = image_from(rng.normal(size=(2, 10, 10)))
        fit = em_fit(img, 3, seed=4)
        assert (np.diff(fit.nll_trace) <= 1e-9).all()

    def test_fixed_point(self, separated_pair):
        img, _ = separated_pair
        fit = em_fit(img, 2, seed=1)
        again = m_step(img, e_step(img, fit.params))
        assert abs(nll(img, again) - fit.nll_trace[-1]) < 1e-3

    def test_too_few_pixels(self):
        with pytest.raises(TooFewPixels):
            em_fit(image_from([[0.0, 1.0]]), 3)

    def test_deterministic(self, rng):
        img = image_from(rng.normal(size=(1, 8, 8)))
        a, b = em_fit(img, 2, seed=7), em_fit(img, 2, seed=7)
        np.testing.assert_array_equal(a.nll_trace, b.nll_trace)
        np.testing.assert_array_equal(a.params.means, b.params.means)

    def test_restarts_never_worse(self, rng):
        img = image_from(rng.normal(size=(1, 10, 10)))
        single = em_fit(img, 3, seed=2)
        multi = em_fit(img, 3, seed=2, opts=EMOptions(n_init=4))
        assert multi.nll_trace[-1] <= single.nll_trace[-1]

    def test_random_init(self, rng):
        img = image_from(rng.normal(size=(1, 5, 5)))
        p = random_init(img, 3, np.random.default_rng(0))
        assert len({tuple(m) for m in p.means}) == 3
        for m in p.means:
            assert any(np.array_equal(m, x) for x in img.pixels)
        np.testing.assert_allclose(p.weights, 1 / 3)

    def test_final_responsibilities_are_posterior(self, separated_pair):
        img, _ = separated_pair
        fit = em_fit(img, 2, seed=0)
        np.testing.assert_allclose(fit.responsibilities.weights, e_step(img, fit.params).weights)

    def test_rescue_moves_dead_component_to_worst_pixel(self):
        x = np.array([[0.0], [0.1], [0.2], [9.0]])
        means = np.array([[0.1], [np.nan]])
        var = np.array([[0.01], [np.nan]])
        ll = np.array([-1.0, -0.5, -1.0, -40.0])
        new_means, new_var = rescue_components(x, np.array([4.0, 0.0]), means, var, [1], ll)
        assert new_means[1, 0] == 9.0
        np.testing.assert_allclose(new_var[1], x.var(axis=0))
        np.testing.assert_array_equal(new_means[0], means[0])
