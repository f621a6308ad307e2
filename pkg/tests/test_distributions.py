import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from conftest import gaussian_env_1d, open_set_env, truncated_env_2d, uniform_env_1d
from oracles import gaussian_density, posterior_loop
from scod.config import parse_toml
from scod.distributions import (
    GaussianClassConditional,
    LabeledMixtureDistribution,
    ScodEnvironment,
    TruncatedGaussian,
    UniformBox,
    environment_from_config,
    open_set_restrict,
)
from scod.errors import ConfigError, DataError


class TestGaussian:
    def test_log_pdf_matches_scipy(self, rng):
        g = GaussianClassConditional([1.0, -2.0], [0.5, 2.0])
        X = rng.normal(size=(20, 2))
        ref = multivariate_normal([1, -2], np.diag([0.5, 2])).logpdf(X)
        assert np.allclose(g.log_pdf(X), ref, rtol=1e-9)

    def test_full_covariance(self, rng):
        cov = np.array([[2.0, 0.6], [0.6, 1.0]])
        g = GaussianClassConditional([0.0, 0.0], cov)
        X = rng.normal(size=(10, 2))
        assert np.allclose(g.log_pdf(X), multivariate_normal([0, 0], cov).logpdf(X), rtol=1e-9)

    def test_isotropic_against_loop_oracle(self, rng):
        g = GaussianClassConditional([0.5, 0.5], 1.5)
        for x in rng.normal(size=(5, 2)):
            assert np.isclose(g.pdf(x), gaussian_density(x, [0.5, 0.5], 1.5), rtol=1e-9)

    def test_bad_covariance(self):
        with pytest.raises(ConfigError):
            GaussianClassConditional([0.0], -1.0)
        with pytest.raises(ConfigError):
            GaussianClassConditional([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_nan_input(self):
        with pytest.raises(DataError):
            GaussianClassConditional([0.0], 1.0).log_pdf([np.nan])

    def test_density_integrates_to_one(self):
        # Monte Carlo over a covering box
        rng = np.random.default_rng(0)
        g = GaussianClassConditional([0.3, -0.2], 0.8)
        U = rng.uniform(-8, 8, size=(200_000, 2))
        est = g.pdf(U).mean() * 16**2
        assert abs(est - 1.0) < 0.02


class TestMixture:
    def test_priors_must_sum_to_one(self):
        g = GaussianClassConditional([0.0], 1.0)
        with pytest.raises(ConfigError):
            LabeledMixtureDistribution([0.5, 0.4], [g, g])

    def test_symmetric_posterior(self, env1d):
        assert np.allclose(env1d.inlier_posterior(np.array([[0.0]])), [[0.5, 0.5]])

    def test_far_point_posterior(self):
        m = LabeledMixtureDistribution(
            [0.5, 0.5], [GaussianClassConditional([0.0], 1.0), GaussianClassConditional([10.0], 1.0)]
        )
        assert m.posterior(np.array([[0.0]]))[0, 0] >= 0.999

    def test_underflow_falls_back_to_prior(self):
        m = LabeledMixtureDistribution(
            [0.3, 0.7],
            [UniformBox([0.0], [1.0]), UniformBox([2.0], [3.0])],
        )
        assert np.allclose(m.posterior(np.array([[5.0]])), [[0.3, 0.7]])

    def test_posterior_matches_loop(self, rng):
        means = [[0.0, 0.0], [2.0, 0.0], [1.0, 1.7]]
        m = LabeledMixtureDistribution([0.2, 0.5, 0.3], [GaussianClassConditional(mu, 1.0) for mu in means])
        X = rng.normal(size=(10, 2)) * 2
        ref = [posterior_loop(x, means, 1.0, [0.2, 0.5, 0.3]) for x in X]
        assert np.allclose(m.posterior(X), ref, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_posterior_is_simplex(self, a, b):
        _, env = open_set_env()
        p = env.inlier_posterior(np.array([[a, b]]))
        assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-9

    def test_posterior_sums_to_one_many_points(self, rng):
        _, env = open_set_env()
        p = env.inlier_posterior(rng.normal(scale=10, size=(10_000, 2)))
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-9

    def test_log_and_direct_agree(self, rng):
        _, env = open_set_env()
        X = rng.normal(scale=2, size=(1000, 2))
        direct = sum(
            p * c.pdf(X) for p, c in zip(env.inlier.priors, env.inlier.conditionals)
        )
        ok = direct > 1e-300
        assert np.allclose(np.exp(env.log_pdf_in(X))[ok], direct[ok], rtol=1e-9)

    def test_sampling_deterministic(self, env1d):
        a = env1d.sample("inlier", 50, seed=3)
        b = env1d.sample("inlier", 50, seed=3)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


class TestOpenSet:
    def test_equal_priors(self):
        full, env = open_set_env()
        assert np.allclose(env.inlier.priors, [1 / 3] * 3)
        assert env.pi_in_star == pytest.approx(0.75)

    def test_renormalisation(self):
        g = [GaussianClassConditional([float(k)], 1.0) for k in range(3)]
        full = LabeledMixtureDistribution([0.5, 0.3, 0.2], g)
        env = open_set_restrict(full, 2)
        assert np.allclose(env.inlier.priors, [0.625, 0.375])

    def test_zero_prior_rejected(self):
        g = [GaussianClassConditional([float(k)], 1.0) for k in range(3)]
        full = LabeledMixtureDistribution([0.5, 0.5, 0.0], g)
        with pytest.raises(ConfigError):
            open_set_restrict(full, 2)

    def test_restricted_posterior_identity(self, rng):
        full, env = open_set_env()
        X = rng.normal(scale=3, size=(2000, 2))
        p_te = full.posterior(X)
        expected = p_te[:, :3] / p_te[:, :3].sum(axis=1, keepdims=True)
        assert np.allclose(env.inlier_posterior(X), expected, atol=1e-9)


class TestEnvironment:
    def test_mixture_identities(self, rng):
        env = gaussian_env_1d(pi_mix=0.3, pi_star=0.6)
        X = rng.normal(scale=3, size=(500, 1))
        pin, pout = np.exp(env.log_pdf_in(X)), np.exp(env.log_pdf_out(X))
        assert np.allclose(np.exp(env.log_pdf_mix(X)), 0.3 * pin + 0.7 * pout, rtol=1e-12)
        assert np.allclose(np.exp(env.log_pdf_test(X)), 0.6 * pin + 0.4 * pout, rtol=1e-12)

    def test_ratio_identity(self):
        g = GaussianClassConditional([0.0], 1.0)
        env = ScodEnvironment(LabeledMixtureDistribution([1.0], [g]), g)
        assert np.allclose(env.density_ratio(np.linspace(-3, 3, 7)[:, None]), 1.0)

    def test_ratio_midpoint(self):
        g0 = GaussianClassConditional([0.0], 1.0)
        env = ScodEnvironment(LabeledMixtureDistribution([1.0], [g0]), GaussianClassConditional([3.0], 1.0))
        assert env.density_ratio(np.array([[1.5]]))[0] == pytest.approx(1.0, abs=1e-12)

    def test_ratio_infinite_off_support(self):
        env = ScodEnvironment(
            LabeledMixtureDistribution([1.0], [UniformBox([0.0], [1.0])]), UniformBox([0.0], [5.0])
        )
        assert np.isinf(env.density_ratio(np.array([[3.0]]))[0])
        # both densities zero: also +inf
        assert np.isinf(env.density_ratio(np.array([[9.0]]))[0])

    def test_empty_sample(self, env1d):
        assert len(env1d.sample("wild", 0, seed=1)) == 0

    def test_wild_all_inlier(self):
        env = gaussian_env_1d(pi_mix=1.0)
        s = env.sample("wild", 200, seed=2)
        assert np.all(s.origin == "inlier") and np.all(s.labels >= 0)

    def test_wild_fraction(self):
        env = gaussian_env_1d(pi_mix=0.1)
        s = env.sample("wild", 10_000, seed=7)
        assert abs(s.inlier_mask.mean() - 0.1) <= 0.02
        assert np.all(s.labels[~s.inlier_mask] == -1)

    def test_strict_inlier_truncated(self):
        env = truncated_env_2d()
        s = env.sample_strict_inlier(300, seed=1)
        assert s.exact_strict
        assert np.all(np.isneginf(env.log_pdf_out(s.features)))

    def test_strict_inlier_fallback_flagged(self):
        s = gaussian_env_1d().sample_strict_inlier(50, seed=1)
        assert not s.exact_strict and len(s) == 50

    def test_uniform_outlier_strict_fallback(self):
        # the uniform box covers essentially all inlier mass
        s = uniform_env_1d().sample_strict_inlier(20, seed=0)
        assert len(s) == 20

    def test_truncated_density_normalised(self):
        t = TruncatedGaussian([0.0, 3.5], 1.0, axis=1, bound=1.5)
        rng = np.random.default_rng(1)
        U = rng.uniform([-6, 1.5], [6, 10], size=(200_000, 2))
        est = t.pdf(U).mean() * 12 * 8.5
        assert abs(est - 1.0) < 0.02
        S = t.sample(1000, rng)
        assert np.all(S[:, 1] >= 1.5)

    def test_invalid_weights(self):
        g = GaussianClassConditional([0.0], 1.0)
        inl = LabeledMixtureDistribution([1.0], [g])
        with pytest.raises(ConfigError):
            ScodEnvironment(inl, g, pi_in_star=1.0)
        with pytest.raises(ConfigError):
            ScodEnvironment(inl, g, pi_mix=-0.1)


def test_environment_from_toml():
    cfg = parse_toml(
        """
        pi_mix = 0.2
        [[classes]]
        mean = [0.0]
        variance = 1.0
        [[classes]]
        mean = [3.0]
        variance = 2.0
        [outlier]
        kind = "uniform"
        low = [-5.0]
        high = [5.0]
        """
    )
    env = environment_from_config(cfg)
    assert env.num_classes == 2 and env.pi_mix == 0.2
    again = environment_from_config(env.to_config())
    X = np.linspace(-4, 4, 9)[:, None]
    assert np.allclose(again.log_pdf_mix(X), env.log_pdf_mix(X))


def test_environment_config_errors():
    with pytest.raises(ConfigError):
        environment_from_config({"classes": [{"mean": [0.0]}]})
    with pytest.raises(ConfigError):
        environment_from_config({"classes": [{"mean": [0.0]}], "outlier": {"kind": "cauchy"}})
    with pytest.raises(ConfigError):
        parse_toml("x = [1,")
