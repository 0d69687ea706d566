import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdma import (
    EstimateRecord,
    EstimateSet,
    WeightScheme,
    custom_weights,
    equal_weights,
    team_split_weights,
    validate_set,
)
from sdma.errors import (
    DuplicateLabel,
    EmptySet,
    NonFiniteValue,
    NonPositiveSE,
    NonPositiveWeight,
    WeightSumError,
)

from conftest import make_set


def rec(label, y=0.0, se=1.0, team=""):
    return EstimateRecord(label=label, y=y, se=se, team=team)


class TestValidateSet:
    def test_minimal(self):
        assert validate_set([rec("a")]).K == 1

    def test_zero_se(self):
        with pytest.raises(NonPositiveSE):
            validate_set([rec("a", y=0.1, se=0.0)])

    @pytest.mark.parametrize("se", [-1.0, -1e-300])
    def test_negative_se(self, se):
        with pytest.raises(NonPositiveSE):
            rec("a", se=se)

    @pytest.mark.parametrize("y,se", [(math.nan, 1.0), (math.inf, 1.0), (0.0, math.inf), (0.0, math.nan)])
    def test_non_finite(self, y, se):
        with pytest.raises(NonFiniteValue):
            rec("a", y=y, se=se)

    def test_duplicate_label(self):
        with pytest.raises(DuplicateLabel):
            validate_set([rec("a"), rec("a", y=1.0)])

    def test_empty(self):
        with pytest.raises(EmptySet):
            validate_set([])

    def test_twenty_nine_teams(self):
        s = validate_set([rec(f"team{k}", y=0.2, se=0.1) for k in range(29)])
        assert s.K == 29

    def test_duplicate_pairs_allowed(self):
        s = validate_set([rec("a", 0.3, 0.15), rec("b", 0.3, 0.15)])
        assert list(s.y) == [0.3, 0.3]

    def test_arrays_are_read_only(self):
        s = make_set([0.1, 0.2], [1, 1])
        with pytest.raises(ValueError):
            s.y[0] = 5.0


class TestWeights:
    def test_equal_one(self):
        assert equal_weights(1).weights == (1.0,)

    def test_equal_four(self):
        assert equal_weights(4).weights == (0.25,) * 4

    def test_equal_29(self):
        w = equal_weights(29)
        assert all(x == 1 / 29 for x in w.weights)
        assert math.fsum(w.weights) == pytest.approx(1.0, abs=1e-12)

    def test_equal_zero(self):
        with pytest.raises(EmptySet):
            equal_weights(0)

    def test_team_split_distinct(self):
        s = make_set([0, 1], [1, 1], teams=["A", "B"])
        assert team_split_weights(s).weights == (0.5, 0.5)

    def test_team_split_uneven(self):
        s = make_set([0, 1, 2], [1, 1, 1], teams=["A", "A", "B"])
        T = 2
        expected = [1 / (T * 2), 1 / (T * 2), 1 / (T * 1)]
        assert team_split_weights(s).weights == pytest.approx(expected, abs=1e-15)
        assert team_split_weights(s).weights == pytest.approx([0.25, 0.25, 0.5])

    def test_team_split_single_team(self):
        s = make_set([0, 1, 2], [1, 1, 1], teams=["A"] * 3)
        assert team_split_weights(s).weights == pytest.approx([1 / 3] * 3, abs=1e-15)

    def test_custom(self):
        assert custom_weights([2, 2]).weights == (0.5, 0.5)
        assert custom_weights([1, 3]).weights == (0.25, 0.75)

    def test_custom_zero(self):
        with pytest.raises(NonPositiveWeight):
            custom_weights([1, 0])

    def test_small_drift_renormalized(self):
        w = WeightScheme((0.5 + 5e-7, 0.5))
        assert math.fsum(w.weights) == pytest.approx(1.0, abs=1e-12)

    def test_large_drift_rejected(self):
        with pytest.raises(WeightSumError):
            WeightScheme((0.6, 0.5))

    def test_record_is_immutable(self):
        r = rec("a")
        with pytest.raises(AttributeError):
            r.y = 2.0


@given(st.integers(min_value=1, max_value=500))
def test_equal_weights_match_distinct_team_split(K):
    s = EstimateSet.from_arrays([0.0] * K, [1.0] * K)
    assert team_split_weights(s).weights == pytest.approx(equal_weights(K).weights, abs=1e-15)


@given(
    st.lists(st.floats(min_value=1e-3, max_value=1e3), min_size=1, max_size=40),
    st.floats(min_value=1e-3, max_value=1e3),
)
def test_custom_weights_scale_invariant(raw, c):
    a = custom_weights(raw).weights
    b = custom_weights([c * x for x in raw]).weights
    assert b == pytest.approx(a, rel=1e-12, abs=0)
    assert abs(math.fsum(a) - 1) <= 1e-9
    assert min(a) > 0


@given(st.lists(st.sampled_from("ABCDE"), min_size=1, max_size=30))
def test_team_split_sums_to_one(teams):
    s = EstimateSet.from_arrays([0.0] * len(teams), [1.0] * len(teams), teams=teams)
    w = team_split_weights(s).weights
    assert abs(math.fsum(w) - 1) <= 1e-9
    assert min(w) > 0
