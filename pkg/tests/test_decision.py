import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdum.decision import (DecisionConfig, assign_treatments, compose_shares, decision_scores, quota_counts,
                           validate_quotas)
from cdum.errors import ConfigError, DimensionError, NumericError

BASE = np.array([0.5, 0.3, 0.2])


class TestScores:
    def test_worked_example(self):
        s = decision_scores(np.array([10.0, 12.0, 9.0]), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(s, [2.0, 8.0])
        np.testing.assert_array_equal(assign_treatments(s).enabled, [True, True])

    def test_interest_scales_treated_score(self):
        assert decision_scores(np.array([0.5, 0.5]), np.array([1.2]))[0] == pytest.approx(0.1, abs=1e-15)

    def test_zero_preferences(self):
        np.testing.assert_array_equal(decision_scores(np.zeros(3), np.array([0.1, 10.0])), [0.0, 0.0])

    def test_threshold_example(self):
        np.testing.assert_array_equal(assign_treatments(np.array([0.1, -0.2])).enabled, [True, False])

    def test_neutral_interest_is_uplift(self):
        prefs = np.array([[5.0, 4.0, 6.0, 5.0]])
        np.testing.assert_array_equal(decision_scores(prefs, np.ones((1, 3))), prefs[:, 1:] - prefs[:, :1])

    def test_zero_score_is_not_enabled(self):
        assert not assign_treatments(np.array([0.0])).enabled[0]

    def test_threshold(self):
        d = assign_treatments(np.array([0.5, 1.5]), DecisionConfig(threshold=1.0))
        np.testing.assert_array_equal(d.enabled, [False, True])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            decision_scores(np.zeros(3), np.zeros(3))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            assign_treatments(np.array([np.nan]))

    def test_bad_clamp(self):
        with pytest.raises(ConfigError):
            DecisionConfig(clamp_low=0.0)

    @given(arrays(np.float64, 4, elements=st.floats(0.0, 100.0)), arrays(np.float64, 3, elements=st.floats(0.1, 10)))
    def test_monotone_in_interest(self, prefs, r):
        bumped = r.copy()
        bumped[0] += 1.0
        assert decision_scores(prefs, bumped)[0] >= decision_scores(prefs, r)[0]


class TestShares:
    def test_no_treatment_is_base(self):
        np.testing.assert_allclose(compose_shares(BASE, np.full(3, 0.1), np.zeros(3, bool)), BASE)

    def test_single_boost_spreads_deficit(self):
        s = compose_shares(BASE, np.array([0.0, 0.1, 0.0]), np.array([False, True, False]))
        np.testing.assert_allclose(s, [0.5 * 0.6 / 0.7, 0.4, 0.2 * 0.6 / 0.7])

    def test_all_enabled_renormalizes(self):
        s = compose_shares(BASE, np.full(3, 0.1), np.ones(3, bool))
        np.testing.assert_allclose(s, np.array([0.6, 0.4, 0.3]) / 1.3)

    def test_oversubscribed_drops_others(self):
        s = compose_shares(BASE, np.array([0.3, 0.3, 0.0]), np.array([True, True, False]))
        np.testing.assert_allclose(s, [0.8 / 1.4, 0.6 / 1.4, 0.0])

    @given(st.lists(st.booleans(), min_size=3, max_size=3))
    def test_shares_on_simplex(self, mask):
        s = compose_shares(BASE, np.full(3, 0.2), np.array(mask))
        assert np.all(s >= 0)
        assert abs(s.sum() - 1.0) < 1e-12

    def test_validate_rejects_negative(self):
        with pytest.raises(ConfigError):
            validate_quotas(BASE, np.array([-0.6, 0.0, 0.0]))

    def test_validate_rejects_bad_base(self):
        with pytest.raises(ConfigError):
            validate_quotas(np.array([0.5, 0.6]), np.zeros(2))


class TestQuotaCounts:
    def test_exact(self):
        np.testing.assert_array_equal(quota_counts(np.array([0.5, 0.3, 0.2]), 10), [[5, 3, 2]])

    def test_ties_to_lower_index(self):
        np.testing.assert_array_equal(quota_counts(np.array([1 / 3, 1 / 3, 1 / 3]), 10), [[4, 3, 3]])

    @given(arrays(np.float64, 4, elements=st.floats(0.01, 1.0)), st.integers(1, 40))
    def test_sums_to_slate(self, w, n):
        c = quota_counts(w / w.sum(), n)
        assert c.sum() == n and np.all(c >= 0)
