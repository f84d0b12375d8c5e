import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metabias.effectsize import (
    ContinuousArms,
    Estimate,
    Metric,
    TwoByTwo,
    convert_point,
    convert_with_se,
    logor_from_counts,
    one_sided_p,
    smd_from_continuous,
)

ALL_METRICS = list(Metric)


def valid_grid(metric):
    if metric is Metric.CORRELATION_R:
        return np.linspace(-0.95, 0.95, 21)
    return np.linspace(-2.5, 2.5, 21)


class TestConvertPoint:
    def test_zero_maps_to_zero(self):
        assert convert_point(0.0, Metric.CORRELATION_R, Metric.COHEN_D) == 0.0

    def test_spot_values(self):
        assert convert_point(0.5, Metric.CORRELATION_R, Metric.COHEN_D) == pytest.approx(
            2 * 0.5 / math.sqrt(1 - 0.25), abs=1e-12
        )
        assert convert_point(0.5, Metric.CORRELATION_R, Metric.COHEN_D) == pytest.approx(1.154701, abs=1e-6)
        assert convert_point(1.0, Metric.LOG_OR, Metric.COHEN_D) == pytest.approx(
            math.sqrt(3) / math.pi, abs=1e-12
        )
        assert convert_point(1.0, Metric.LOG_OR, Metric.COHEN_D) == pytest.approx(0.551329, abs=1e-6)
        assert convert_point(0.5, Metric.CORRELATION_R, Metric.FISHER_Z) == pytest.approx(
            math.atanh(0.5), abs=1e-12
        )

    def test_round_trips_all_pairs(self):
        for src in ALL_METRICS:
            for dst in ALL_METRICS:
                for y in valid_grid(src):
                    there = convert_point(float(y), src, dst)
                    back = convert_point(there, dst, src)
                    assert back == pytest.approx(float(y), abs=1e-12)

    def test_path_independence_through_r(self):
        # logOR -> d directly vs logOR -> z -> d
        for y in np.linspace(-2, 2, 9):
            direct = convert_point(float(y), Metric.LOG_OR, Metric.COHEN_D)
            via_z = convert_point(
                convert_point(float(y), Metric.LOG_OR, Metric.FISHER_Z), Metric.FISHER_Z, Metric.COHEN_D
            )
            assert direct == pytest.approx(via_z, abs=1e-12)

    def test_rejects_degenerate_correlation(self):
        with pytest.raises(ValueError):
            convert_point(1.0, Metric.CORRELATION_R, Metric.COHEN_D)
        with pytest.raises(ValueError):
            convert_point(math.inf, Metric.COHEN_D, Metric.FISHER_Z)


class TestConvertWithSe:
    def test_identity(self):
        assert convert_with_se(0.3, 0.1, Metric.COHEN_D, Metric.COHEN_D) == (0.3, 0.1)

    def test_point_matches_convert_point(self):
        for src in ALL_METRICS:
            for dst in ALL_METRICS:
                for y in valid_grid(src):
                    value, _ = convert_with_se(float(y), 0.1, src, dst)
                    assert value == convert_point(float(y), src, dst)

    def test_linear_logor_to_d_scales_se(self):
        value, se = convert_with_se(1.0, 0.5, Metric.LOG_OR, Metric.COHEN_D)
        assert value == pytest.approx(0.551329, abs=1e-6)
        assert se == pytest.approx(0.5 * math.sqrt(3) / math.pi, abs=1e-12)

    def test_d_to_z_spot(self):
        value, _ = convert_with_se(0.5, 0.2, Metric.COHEN_D, Metric.FISHER_Z)
        assert value == pytest.approx(0.2475, abs=1e-4)

    def test_se_matches_numeric_jacobian(self):
        h = 1e-6
        for src in ALL_METRICS:
            for dst in ALL_METRICS:
                if src is dst:
                    continue
                for y in valid_grid(src)[2:-2]:
                    y = float(y)
                    _, se = convert_with_se(y, 0.37, src, dst)
                    jac = (convert_point(y + h, src, dst) - convert_point(y - h, src, dst)) / (2 * h)
                    assert se == pytest.approx(0.37 * abs(jac), abs=1e-8)

    def test_rejects_bad_se(self):
        with pytest.raises(ValueError):
            convert_with_se(0.1, 0.0, Metric.COHEN_D, Metric.FISHER_Z)
        with pytest.raises(ValueError):
            convert_with_se(0.1, -1.0, Metric.COHEN_D, Metric.FISHER_Z)


class TestSmd:
    def test_hedges_correction_example(self):
        est = smd_from_continuous(ContinuousArms(1.0, 1.0, 10, 0.0, 1.0, 10))
        assert est.y == pytest.approx(1.0 - 3.0 / 71.0, abs=1e-12)
        assert est.y == pytest.approx(0.957746, abs=1e-6)
        assert est.metric is Metric.COHEN_D

    def test_equal_means_zero(self):
        est = smd_from_continuous(ContinuousArms(5.0, 2.0, 20, 5.0, 2.0, 20))
        assert est.y == 0.0

    def test_swapping_arms_negates(self):
        a = smd_from_continuous(ContinuousArms(1.3, 1.1, 14, 0.4, 0.9, 17))
        b = smd_from_continuous(ContinuousArms(0.4, 0.9, 17, 1.3, 1.1, 14))
        assert a.y == pytest.approx(-b.y, abs=1e-14)
        assert a.se == pytest.approx(b.se, abs=1e-14)

    def test_variance_formula(self):
        est = smd_from_continuous(ContinuousArms(1.0, 1.0, 10, 0.0, 1.0, 10))
        expected_var = 1 / 10 + 1 / 10 + est.y**2 / 40
        assert est.se == pytest.approx(math.sqrt(expected_var), abs=1e-12)

    def test_rejects_tiny_arms(self):
        with pytest.raises(ValueError):
            ContinuousArms(1.0, 1.0, 1, 0.0, 1.0, 10)


class TestLogOr:
    def test_symmetric_table(self):
        est = logor_from_counts(TwoByTwo(10, 20, 10, 20))
        assert est.y == 0.0
        assert est.se == pytest.approx(math.sqrt(0.4), abs=1e-12)

    def test_zero_cell_correction(self):
        est = logor_from_counts(TwoByTwo(0, 10, 5, 10))
        expected = math.log((0.5 * 5.5) / (10.5 * 5.5))
        assert est.y == pytest.approx(expected, abs=1e-12)
        assert est.y == pytest.approx(-3.0445, abs=1e-4)

    def test_no_correction_when_no_zero_cells(self):
        est = logor_from_counts(TwoByTwo(3, 10, 5, 12))
        a, b, c, d = 3.0, 7.0, 5.0, 7.0
        assert est.y == pytest.approx(math.log(a * d / (b * c)), abs=1e-14)
        assert est.se == pytest.approx(math.sqrt(1 / a + 1 / b + 1 / c + 1 / d), abs=1e-14)

    def test_swapping_arms_negates(self):
        a = logor_from_counts(TwoByTwo(3, 10, 5, 12))
        b = logor_from_counts(TwoByTwo(5, 12, 3, 10))
        assert a.y == pytest.approx(-b.y, abs=1e-14)

    def test_rejects_single_participant_arm(self):
        with pytest.raises(ValueError):
            TwoByTwo(1, 1, 5, 10)


class TestOneSidedP:
    def test_symmetric(self):
        assert one_sided_p(0.0, 1.0) == 0.5

    def test_tails(self):
        assert one_sided_p(1.96, 1.0) == pytest.approx(0.0250, abs=1e-4)
        assert one_sided_p(-1.6449, 1.0) == pytest.approx(0.95, abs=1e-4)

    @given(st.floats(-5, 5), st.floats(0.01, 10))
    def test_reflection_identity(self, y, se):
        assert one_sided_p(y, se) + one_sided_p(-y, se) == pytest.approx(1.0, abs=1e-14)

    @given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0.05, 5))
    def test_strictly_decreasing(self, a, b, se):
        lo, hi = sorted((a, b))
        if hi - lo < 1e-9:
            return
        assert one_sided_p(hi, se) < one_sided_p(lo, se)

    def test_rejects_bad_se(self):
        with pytest.raises(ValueError):
            one_sided_p(0.1, 0.0)


class TestEstimateInvariants:
    def test_estimate_validation(self):
        with pytest.raises(ValueError):
            Estimate(math.nan, 0.1, Metric.COHEN_D)
        with pytest.raises(ValueError):
            Estimate(0.1, 0.0, Metric.COHEN_D)
        with pytest.raises(ValueError):
            Estimate(1.0, 0.1, Metric.CORRELATION_R)

    def test_metric_tags(self):
        assert Metric.from_tag("d") is Metric.COHEN_D
        assert Metric.from_tag(" LOGOR ") is Metric.LOG_OR
        with pytest.raises(ValueError):
            Metric.from_tag("weird")
