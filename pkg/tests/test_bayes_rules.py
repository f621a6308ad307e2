import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gaussian_env_1d
from oracles import bayes_decision_loop
from scod.bayes_rules import (
    CostSpec,
    chow_rule,
    density_rejection,
    msp_disagreement_witness,
    msp_reject,
    open_set_bayes,
    open_set_sample_dependent,
    open_set_threshold,
    scod_bayes,
    weighted_reject,
)
from scod.errors import ConfigError, InvalidCostError


def random_simplex(rng, n, L):
    return rng.dirichlet(np.ones(L), size=n)


class TestCostSpec:
    def test_weights(self):
        assert CostSpec(0.2, 0.3).weights == pytest.approx((0.5, 0.2, 0.3))

    @pytest.mark.parametrize("c_in,c_out", [(-0.1, 0.2), (0.6, 0.5), (0.2, 1.1)])
    def test_invalid(self, c_in, c_out):
        with pytest.raises(InvalidCostError):
            CostSpec(c_in, c_out)


class TestChow:
    def test_boundary_accepts(self):
        assert not chow_rule([0.5, 0.5], 0.5).abstain

    def test_hand_example(self):
        d = chow_rule([0.7, 0.3], 0.2)
        assert d.abstain and d.threshold == pytest.approx(0.25)

    def test_zero_cost(self):
        assert chow_rule([0.9, 0.1], 0.0).abstain
        assert not chow_rule([1.0, 0.0], 0.0).abstain

    def test_cost_one_rejected(self):
        with pytest.raises(InvalidCostError):
            chow_rule([0.5, 0.5], 1.0)

    def test_argmax_tie_lowest_index(self):
        assert chow_rule([0.4, 0.4, 0.2], 0.9).label == 0


class TestDensityRejection:
    def test_examples(self):
        assert not density_rejection(1.0, 0.5).abstain
        assert density_rejection(3.0, 0.2).abstain
        assert density_rejection(np.inf, 0.01).abstain

    def test_cost_one(self):
        with pytest.raises(InvalidCostError):
            density_rejection(1.0, 1.0)


class TestScodBayes:
    def test_hand_example(self):
        d = scod_bayes([0.9, 0.1], 2 / 3, CostSpec(0.2, 0.3))
        assert d.abstain and d.score == pytest.approx(0.25)

    def test_infinite_ratio_abstains(self):
        assert scod_bayes([1.0, 0.0], np.inf, CostSpec(0.3, 0.1)).abstain

    def test_infinite_ratio_ignored_without_ood_cost(self):
        assert not scod_bayes([1.0, 0.0], np.inf, CostSpec(0.3, 0.0)).abstain

    def test_reduces_to_chow(self, rng):
        p = random_simplex(rng, 10_000, 4)
        r = rng.exponential(size=10_000)
        for c in (0.05, 0.2, 0.45):
            a = scod_bayes(p, r, CostSpec(c, 0.0)).abstain
            assert np.array_equal(a, chow_rule(p, c).abstain)

    def test_reduces_to_density_rejection(self, rng):
        p = random_simplex(rng, 10_000, 3)
        r = rng.exponential(size=10_000)
        for c in (0.1, 0.5, 0.8):
            a = scod_bayes(p, r, CostSpec(c, 1.0 - c)).abstain
            assert np.array_equal(a, density_rejection(r, c).abstain)

    def test_matches_loop_oracle(self, rng):
        p = random_simplex(rng, 500, 3)
        r = rng.exponential(size=500)
        costs = CostSpec(0.25, 0.35)
        a = scod_bayes(p, r, costs).abstain
        ref = [bayes_decision_loop(pi, ri, 0.25, 0.35) for pi, ri in zip(p, r)]
        assert list(a) == ref

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(0, 1), st.floats(0, 1), st.floats(0.34, 1.0), st.floats(0, 20), st.floats(0.01, 100)
    )
    def test_scale_invariance(self, a, b, top, ratio, k):
        c_in, c_out = a * 0.5, b * 0.5
        costs = CostSpec(c_in, c_out)
        w = costs.weights
        d0, _ = weighted_reject(top, ratio, *w)
        d1, _ = weighted_reject(top, ratio, *(k * v for v in w))
        # scaling can only move a point sitting within rounding of the boundary
        _, s0 = weighted_reject(top, ratio, *w)
        if abs(s0 - c_in) > 1e-9 * max(1.0, abs(s0)):
            assert d0 == d1

    def test_is_optimal_among_threshold_rules(self):
        env = gaussian_env_1d()
        costs = CostSpec(0.2, 0.4)
        Xi, yi = env.inlier.sample(10_000, np.random.default_rng(1))
        Xo = env.outlier.sample(10_000, np.random.default_rng(2))
        w_err, c_in, c_out = costs.weights

        def risk(pred, ab_in, ab_out):
            err = (pred != yi) & ~ab_in
            return w_err * err.mean() + c_in * ab_in.mean() + c_out * (~ab_out).mean()

        pi, po = env.inlier_posterior(Xi), env.inlier_posterior(Xo)
        bi = scod_bayes(pi, env.density_ratio(Xi), costs)
        bo = scod_bayes(po, env.density_ratio(Xo), costs)
        best = risk(bi.label, bi.abstain, bo.abstain)
        # competitor family: threshold on the max posterior, and on x itself
        for t in np.linspace(0.5, 1.0, 26):
            assert best <= risk(pi.argmax(1), pi.max(1) < t, po.max(1) < t) + 0.01
        for t in np.linspace(0, 6, 25):
            assert best <= risk(pi.argmax(1), Xi[:, 0] > t, Xo[:, 0] > t) + 0.01


class TestOpenSet:
    def test_threshold_symmetric(self):
        assert open_set_threshold(CostSpec(0.5, 0.5), 0.5) == pytest.approx(0.5)

    def test_threshold_hand(self):
        assert open_set_threshold(CostSpec(0.75, 0.25), 0.25) == pytest.approx(0.5)

    def test_requires_unit_sum(self):
        with pytest.raises(InvalidCostError):
            open_set_threshold(CostSpec(0.3, 0.3), 0.25)

    def test_degenerate_prior(self):
        with pytest.raises(ConfigError):
            open_set_threshold(CostSpec(0.5, 0.5), 1.0)

    def test_zero_held_out_posterior_never_abstains(self):
        d = open_set_bayes([0.5, 0.5, 0.0], 2, CostSpec(0.3, 0.7), 0.25)
        assert not d.abstain

    def test_two_characterisations_agree(self, rng):
        p = random_simplex(rng, 10_000, 4)
        for c_in in (0.2, 0.5, 0.75):
            t = open_set_threshold(CostSpec(c_in, 1 - c_in), 0.25)
            a = p[:, 3] > t
            b = open_set_sample_dependent(p, 3, t)
            away = np.abs(p[:, 3] - t) > 1e-9
            assert np.array_equal(a[away], b[away])
            open_set_bayes(p, 3, CostSpec(c_in, 1 - c_in), 0.25)


class TestMspWitness:
    def test_case_i(self):
        w = msp_disagreement_witness(3, 0.4, 0.1)
        assert w.case == "i"
        assert np.allclose(w.test_posterior, [0.05, 0.05, 0.9])
        assert np.allclose(w.inlier_posterior, [0.5, 0.5])
        assert not w.msp_abstains

    def test_case_ii(self):
        w = msp_disagreement_witness(3, 0.8, 0.1)
        assert w.case == "ii"
        assert np.allclose(w.test_posterior, [0.45, 0.45, 0.1])
        assert w.msp_abstains

    @pytest.mark.parametrize("t_msp", np.round(np.arange(0.05, 0.96, 0.05), 2))
    def test_disagrees_with_bayes(self, t_msp):
        L = 4
        w = msp_disagreement_witness(L, t_msp, 0.1)
        lo, hi = w.bayes_disagrees_for
        t = 0.5 * (lo + hi)
        # pick costs whose open-set threshold is t with the held-out prior 0.25
        z = t / (1 - t)
        c_in = z * 0.75 / (0.25 + z * 0.75)
        costs = CostSpec(c_in, 1 - c_in)
        assert open_set_threshold(costs, 0.25) == pytest.approx(t)
        bayes = bool(open_set_bayes(w.test_posterior, L - 1, costs, 0.25).abstain)
        assert bayes != bool(msp_reject(w.inlier_posterior, t_msp))

    def test_bad_args(self):
        with pytest.raises(ConfigError):
            msp_disagreement_witness(1, 0.5, 0.1)
        with pytest.raises(ConfigError):
            msp_disagreement_witness(3, 1.5, 0.1)
