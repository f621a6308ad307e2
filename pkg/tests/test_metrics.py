import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import auc_pairs, curve_bruteforce, joint_risk_loop
from scod.bayes_rules import CostSpec
from scod.errors import ConfigError, DataError
from scod.metrics import (
    EmptyAcceptanceWarning,
    EvaluationSet,
    auc_rc,
    fpr_at_95tpr,
    inlier_accuracy,
    joint_risk,
    ood_detection_metrics,
    ood_precision,
    ood_recall,
    risk_coverage_curve,
    rows_to_csv,
    soft_penalty_risk,
    to_json,
)


def four_four():
    ev = EvaluationSet.from_parts([0, 1, 0, 1], 4)
    preds = np.array([0, 0, 1, 1, 0, 0, 0, 0])  # two inlier mistakes
    return ev, preds


class TestEvaluationSet:
    def test_validation(self):
        with pytest.raises(DataError):
            EvaluationSet(np.array([0, -1]), np.array([False, False]))
        with pytest.raises(DataError):
            EvaluationSet(np.array([0, 1]), np.array([False, True]))


class TestJointRisk:
    def test_hand_example(self):
        ev, preds = four_four()
        abstain = np.array([False] * 4 + [True] * 4)
        assert joint_risk(ev, preds, abstain, 0.75) == pytest.approx(0.125)

    def test_perfect(self):
        ev = EvaluationSet.from_parts([0, 1], 2)
        assert joint_risk(ev, np.array([0, 1, 0, 0]), np.array([False, False, True, True]), 0.75) == 0.0

    def test_no_rejections(self):
        n = 5
        ev = EvaluationSet.from_parts(np.zeros(n, int), n)
        assert joint_risk(ev, np.zeros(2 * n, int), np.zeros(2 * n, bool), 0.75) == pytest.approx(0.375)

    def test_all_rejected(self):
        ev, preds = four_four()
        with pytest.warns(EmptyAcceptanceWarning):
            assert joint_risk(ev, preds, np.ones(8, bool), 0.75) == 0.0

    def test_matches_loop_and_permutation(self, rng):
        ev = EvaluationSet.from_parts(rng.integers(0, 3, 40), 30)
        preds = rng.integers(0, 3, 70)
        ab = rng.random(70) < 0.3
        ref = joint_risk_loop(ev.labels, ev.is_outlier, preds, ab, 0.6)
        assert joint_risk(ev, preds, ab, 0.6) == pytest.approx(ref, abs=1e-15)
        perm = rng.permutation(70)
        ev2 = EvaluationSet(ev.labels[perm], ev.is_outlier[perm])
        assert joint_risk(ev2, preds[perm], ab[perm], 0.6) == pytest.approx(ref, abs=1e-15)


class TestOtherMetrics:
    def test_inlier_accuracy(self):
        ev = EvaluationSet.from_parts([0, 1], 2)
        preds = np.array([0, 1, 0, 0])
        assert inlier_accuracy(ev, preds, np.zeros(4, bool)) == 0.5
        assert inlier_accuracy(ev, preds, np.array([False, False, True, True])) == 1.0
        with pytest.warns(EmptyAcceptanceWarning):
            assert inlier_accuracy(ev, preds, np.ones(4, bool)) == 0.0

    def test_precision_recall(self):
        ev = EvaluationSet.from_parts([0, 1], 2)
        ab = np.array([True, False, True, False])
        assert ood_precision(ev, ab) == 0.5 and ood_recall(ev, ab) == 0.5
        assert ood_precision(ev, np.zeros(4, bool)) == 0.0

    def test_soft_penalty(self):
        ev = EvaluationSet.from_parts([0, 1], 2)
        preds = np.array([0, 0, 0, 0])
        ab = np.array([False, False, True, False])
        # errors 1/2 accepted, no inlier abstention, half the outliers accepted
        assert soft_penalty_risk(ev, preds, ab, CostSpec(0.2, 0.3)) == pytest.approx(0.5 * 0.5 + 0.3 * 0.5)

    def test_length_mismatch(self):
        ev, preds = four_four()
        with pytest.raises(DataError):
            joint_risk(ev, preds[:3], np.zeros(3, bool), 0.5)


class TestCurve:
    def test_auc_hand(self):
        assert auc_rc([0, 0.5, 1], [0.4, 0.2, 0.0]) == pytest.approx(0.2, abs=1e-12)
        assert auc_rc([0, 0.5, 1], [0.0, 0.0, 0.0]) == 0.0

    def test_matches_bruteforce(self, rng):
        for _ in range(5):
            n_in, n_out = int(rng.integers(3, 25)), int(rng.integers(1, 25))
            ev = EvaluationSet.from_parts(rng.integers(0, 2, n_in), n_out)
            preds = rng.integers(0, 2, n_in + n_out)
            score = rng.integers(0, 6, n_in + n_out).astype(float)  # lots of ties
            c = risk_coverage_curve(ev, score, preds, 0.75, grid_size=11)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                f, r = curve_bruteforce(list(ev.labels), list(ev.is_outlier), list(preds), list(score), 0.75, 11)
            assert np.allclose(c.fractions, f, atol=0) and np.allclose(c.risks, r, atol=1e-15)

    def test_endpoints_and_invariants(self, rng):
        ev = EvaluationSet.from_parts(rng.integers(0, 3, 200), 150)
        preds = rng.integers(0, 3, 350)
        score = rng.normal(size=350)
        c = risk_coverage_curve(ev, score, preds, 0.75)
        assert c.target.size == 101
        assert c.risks[0] == pytest.approx(joint_risk(ev, preds, np.zeros(350, bool), 0.75))
        assert c.fractions[-1] == 1.0 and c.risks[-1] == 0.0
        assert np.all(np.diff(c.fractions) > 0)
        assert c.auc_rc == pytest.approx(float(np.trapezoid(c.risks, c.fractions)), abs=1e-12)
        assert np.all(c.fractions <= c.target + 1e-12)

    def test_monotone_transform_invariance(self, rng):
        ev = EvaluationSet.from_parts(rng.integers(0, 2, 100), 80)
        preds = rng.integers(0, 2, 180)
        score = rng.normal(size=180)
        a = risk_coverage_curve(ev, score, preds, 0.75).auc_rc
        b = risk_coverage_curve(ev, np.exp(3 * score) + 2, preds, 0.75).auc_rc
        assert a == b

    def test_constant_score_degenerate(self):
        ev = EvaluationSet.from_parts([0, 1, 0], 2)
        with pytest.warns(UserWarning):
            c = risk_coverage_curve(ev, np.ones(5), np.zeros(5, int), 0.75, grid_size=5)
        assert c.degenerate and set(c.fractions) == {0.0, 1.0}

    def test_grid_size(self):
        ev = EvaluationSet.from_parts([0], 1)
        with pytest.raises(ConfigError):
            risk_coverage_curve(ev, np.array([0.0, 1.0]), np.zeros(2, int), 0.5, grid_size=1)

    def test_csv(self):
        ev = EvaluationSet.from_parts([0, 1], 2)
        c = risk_coverage_curve(ev, np.array([0.1, 0.2, 0.9, 0.8]), np.array([0, 1, 0, 0]), 0.75, grid_size=3)
        lines = c.to_csv().splitlines()
        assert lines[0] == "target_fraction,realized_fraction,joint_risk,inlier_accuracy,ood_precision,ood_recall"
        assert len(lines) == 4 and lines[2].startswith("0.5,0.5,0.0,1.0,1.0,1.0")


class TestOodMetrics:
    def test_perfect(self):
        m = ood_detection_metrics([0, 1, 2], [5, 6, 7])
        assert m.auc_roc == 1.0 and m.fpr_at_95tpr == 0.0

    def test_identical(self):
        assert ood_detection_metrics([1, 2, 3], [3, 2, 1]).auc_roc == 0.5

    def test_hand(self):
        assert ood_detection_metrics([1, 2, 3, 4], [3, 4, 5, 6]).auc_roc == pytest.approx(0.875)

    def test_fpr_lower_percentile(self):
        out = np.arange(100, dtype=float)  # 5th percentile with 'lower' = 4
        inl = np.array([3.0, 4.0, 4.5, 10.0])
        assert fpr_at_95tpr(inl, out) == 0.5

    def test_threshold_precision_recall(self):
        m = ood_detection_metrics([0.0, 2.0], [1.5, 3.0], threshold=1.0)
        assert m.precision == pytest.approx(2 / 3) and m.recall == 1.0

    def test_empty(self):
        with pytest.raises(DataError):
            ood_detection_metrics([], [1.0])

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.integers(-5, 5), min_size=1, max_size=200),
        st.lists(st.integers(-5, 5), min_size=1, max_size=200),
    )
    def test_rank_statistic_equals_pair_count(self, a, b):
        assert ood_detection_metrics(a, b).auc_roc == auc_pairs(a, b)


def test_serialisation_deterministic():
    rows = [(0.1, 1 / 3, np.float64(2.5), np.int64(3))]
    assert rows_to_csv(("a", "b", "c", "d"), rows) == "a,b,c,d\n0.1,0.3333333333333333,2.5,3\n"
    s = to_json({"b": np.float64(np.inf), "a": np.arange(2)})
    assert s.index('"a"') < s.index('"b"') and '"inf"' in s
