import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metabias.aggregate import (
    K_BINS,
    density_summary,
    field_summary,
    kbin_label,
    kbin_table,
    quantiles,
    summarize_fields,
)
from tests.test_measures import example_row


def rows_with(values, attr="seif", field="demo"):
    base = example_row()
    return [
        type(base)(**{**base.to_row(), attr: v, "ma_id": f"ma{i}", "field": field})
        for i, v in enumerate(values)
    ]


class TestQuantiles:
    def test_order_statistics_example(self):
        q25, med, q75 = quantiles([1, 2, 3, 4, 5], (0.25, 0.5, 0.75))
        assert (q25, med, q75) == (2.0, 3.0, 4.0)

    def test_interpolated_quantile(self):
        assert quantiles([0, 0, 0, 1], (0.75,))[0] == pytest.approx(0.25, abs=1e-15)

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=40), st.floats(0.01, 0.99))
    def test_matches_sort_based_oracle(self, values, p):
        ours = quantiles(values, (p,))[0]
        data = sorted(values)
        h = (len(data) - 1) * p
        lo = int(math.floor(h))
        hi = min(lo + 1, len(data) - 1)
        oracle = data[lo] + (h - lo) * (data[hi] - data[lo])
        assert ours == pytest.approx(oracle, abs=1e-9)


class TestFieldSummary:
    def test_median_iqr_example(self):
        rows = rows_with([1.0, 2.0, 3.0, 4.0, 5.0])
        summary = field_summary(rows, "demo")
        stats = summary.stats["seif"]
        assert stats.median == 3.0
        assert (stats.q25, stats.q75) == (2.0, 4.0)

    def test_all_strong_bfs(self):
        rows = []
        for i in range(4):
            rows.append(
                type(example_row())(
                    **{**example_row(f"m{i}").to_row(), "log_bf10_adj": math.log(20.0), "ma_id": f"m{i}"}
                )
            )
        summary = field_summary(rows, "demo")
        assert summary.prop_bf["adj_gt_10"] == 1.0
        assert summary.prop_bf["adj_gt_3"] == 1.0
        assert summary.prop_bf["adj_lt_third"] == 0.0

    def test_mean_ci_formula(self):
        values = [0.1, 0.4, 0.3, 0.8, 0.5]
        rows = rows_with(values)
        stats = field_summary(rows, "demo").stats["seif"]
        mean = float(np.mean(values))
        half = 1.959963984540054 * float(np.std(values, ddof=1)) / math.sqrt(len(values))
        assert stats.mean == pytest.approx(mean, abs=1e-12)
        assert stats.ci_low == pytest.approx(mean - half, abs=1e-12)
        assert stats.ci_high == pytest.approx(mean + half, abs=1e-12)

    def test_nonconverged_excluded_from_significance(self):
        rows = rows_with([1.0, 2.0, 3.0])
        broken = type(rows[0])(**{**rows[0].to_row(), "ma_id": "broken", "reml_converged": False,
                                  "reml_significant": True})
        ok_insig = type(rows[0])(**{**rows[0].to_row(), "ma_id": "insig", "reml_significant": False})
        summary = field_summary(rows + [broken, ok_insig], "demo")
        assert summary.reml_nonconverged == 1
        # 3 significant of 4 converged
        assert summary.prop_significant == pytest.approx(0.75)

    def test_mean_of_per_ma_of_differs_from_aggregate(self):
        # asymmetric fixture: ratio of means != mean of ratios
        y_bars = [0.8, 0.1, 0.3]
        mu_adjs = [0.2, 0.09, 0.02]
        rows = []
        for i, (yb, mu) in enumerate(zip(y_bars, mu_adjs)):
            rows.append(
                type(example_row())(
                    **{
                        **example_row().to_row(),
                        "ma_id": f"m{i}",
                        "y_bar": yb,
                        "mu_adj": mu,
                        "of": yb / mu,
                    }
                )
            )
        summary = field_summary(rows, "demo")
        mean_of_ratios = summary.stats["of"].mean
        ratio_of_means = summary.of_aggregate[0]
        assert ratio_of_means == pytest.approx(sum(y_bars) / sum(mu_adjs), rel=1e-12)
        assert abs(mean_of_ratios - ratio_of_means) > 0.1

    def test_eif_overflow_omitted_and_counted(self):
        rows = rows_with([1.0, 2.0, 3.0])
        extreme = type(rows[0])(**{**rows[0].to_row(), "ma_id": "x", "log_eif": 5000.0})
        summary = field_summary(rows + [extreme], "demo")
        assert summary.eif_omitted == 1
        assert summary.stats["eif"].n == 3

    def test_unknown_field_errors(self):
        with pytest.raises(ValueError):
            field_summary(rows_with([1.0]), "elsewhere")


class TestKBins:
    def test_bin_boundaries(self):
        assert kbin_label(3) == "<5"
        assert kbin_label(4) == "<5"
        assert kbin_label(5) == "5-9"
        assert kbin_label(9) == "5-9"
        assert kbin_label(10) == "10-19"
        assert kbin_label(299) == "100-299"
        assert kbin_label(300) == ">=300"
        assert kbin_label(12_000) == ">=300"

    def test_bins_partition(self):
        edges = [(lo, hi) for _, lo, hi in K_BINS]
        assert edges[0][0] == 3
        for (lo1, hi1), (lo2, hi2) in zip(edges, edges[1:]):
            assert hi1 == lo2
        assert edges[-1][1] == math.inf

    def test_counts_per_bin(self):
        rows = []
        for i, n in enumerate((3, 7, 15)):
            rows.append(type(example_row())(**{**example_row().to_row(), "ma_id": f"m{i}", "n_estimates": n}))
        table = kbin_table(rows, "seif", "median")
        counts = {r["bin"]: r["count"] for r in table}
        assert counts["<5"] == 1
        assert counts["5-9"] == 1
        assert counts["10-19"] == 1
        assert counts["20-29"] == 0

    def test_empty_bins_blank(self):
        rows = [type(example_row())(**{**example_row().to_row(), "n_estimates": 300})]
        table = kbin_table(rows, "seif", "median")
        big = [r for r in table if r["bin"] == ">=300"][0]
        empty = [r for r in table if r["bin"] == "<5"][0]
        assert big["count"] == 1 and big["median"] is not None
        assert empty["count"] == 0 and empty["median"] is None

    def test_counts_sum_to_field_total(self):
        rng = np.random.default_rng(1)
        rows = [
            type(example_row())(
                **{**example_row().to_row(), "ma_id": f"m{i}", "n_estimates": int(rng.integers(3, 400))}
            )
            for i in range(25)
        ]
        table = kbin_table(rows, "seif", "mean")
        assert sum(r["count"] for r in table) == 25


class TestDensitySummary:
    def test_example_quantiles(self):
        res = density_summary([0.0, 0.0, 0.0, 1.0])
        assert res.median == 0.0
        assert res.q75 == pytest.approx(0.25, abs=1e-15)

    def test_kde_integrates_to_one(self):
        rng = np.random.default_rng(8)
        values = rng.standard_normal(60)
        res = density_summary(values, grid_size=200)
        total = np.trapezoid(res.density, res.grid)
        assert total == pytest.approx(1.0, abs=0.01)

    def test_symmetric_values_symmetric_density(self):
        values = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0]
        res = density_summary(values, grid_size=101)
        assert np.allclose(res.density, res.density[::-1], atol=1e-12)

    def test_requires_spread(self):
        with pytest.raises(ValueError):
            density_summary([1.0])
        with pytest.raises(ValueError):
            density_summary([2.0, 2.0, 2.0])


class TestGoldenSummary:
    def test_golden_summary_byte_identical(self):
        from tests.golden import DATA_DIR, golden_measure_rows, golden_summary_text

        frozen = (DATA_DIR / "golden_summary.json").read_text(encoding="utf-8")
        rows = golden_measure_rows()
        regenerated = golden_summary_text(rows)
        assert regenerated == frozen

        # sanity oracles against the frozen numbers
        payload = json.loads(frozen)
        by_field = {p["field"]: p for p in payload}
        assert set(by_field) == {"clean", "selected"}
        for field_name, doc in by_field.items():
            group = [r for r in rows if r.field == field_name]
            assert doc["n_mas"] == len(group) == 6
            seif_values = sorted(r.seif for r in group)
            assert doc["stats"]["seif"]["median"] == pytest.approx(
                float(np.quantile(seif_values, 0.5)), abs=1e-12
            )
            assert doc["stats"]["post_psb"]["mean"] == pytest.approx(
                float(np.mean([r.post_psb for r in group])), abs=1e-12
            )
        # the selected field should carry the heavier bias footprint
        assert (
            by_field["selected"]["stats"]["post_psb"]["mean"]
            > by_field["clean"]["stats"]["post_psb"]["mean"]
        )
