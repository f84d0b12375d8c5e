"""Field-level and size-binned summaries of the per-meta-analysis measures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from metabias.measures import MeasureSet, overestimation_factor

LOG_3 = math.log(3.0)
LOG_10 = math.log(10.0)

K_BINS: tuple[tuple[str, int, float], ...] = (
    ("<5", 3, 5),
    ("5-9", 5, 10),
    ("10-19", 10, 20),
    ("20-29", 20, 30),
    ("30-49", 30, 50),
    ("50-99", 50, 100),
    ("100-299", 100, 300),
    (">=300", 300, math.inf),
)

SUMMARY_MEASURES = (
    "n_estimates",
    "y_bar",
    "mu_adj",
    "bias",
    "of",
    "eif",
    "seif",
    "post_effect_adj",
    "post_effect_unadj",
    "post_psb",
)


def kbin_label(n_estimates: int) -> str:
    for label, lo, hi in K_BINS:
        if lo <= n_estimates < hi:
            return label
    raise ValueError(f"meta-analyses have at least 3 estimates, got {n_estimates}")


@dataclass(frozen=True)
class MeasureStats:
    """Median/IQR and mean/95% CI of one measure within a group."""

    n: int
    median: float
    q25: float
    q75: float
    mean: float
    ci_low: float
    ci_high: float

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "median": self.median,
            "q25": self.q25,
            "q75": self.q75,
            "mean": self.mean,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


@dataclass
class FieldSummary:
    """All reported summaries for one field."""

    field: str
    n_mas: int
    stats: dict[str, MeasureStats]
    prop_significant: float | None
    reml_nonconverged: int
    prop_bf: dict[str, float]
    of_aggregate: tuple[float, float, float] | None
    eif_omitted: int
    of_excluded: int

    def to_json_dict(self) -> dict:
        return {
            "field": self.field,
            "n_mas": self.n_mas,
            "stats": {k: v.to_json_dict() for k, v in self.stats.items()},
            "prop_significant": self.prop_significant,
            "reml_nonconverged": self.reml_nonconverged,
            "prop_bf": dict(sorted(self.prop_bf.items())),
            "of_aggregate": list(self.of_aggregate) if self.of_aggregate else None,
            "eif_omitted": self.eif_omitted,
            "of_excluded": self.of_excluded,
        }


def quantiles(values, probs) -> list[float]:
    """Linear-interpolation (type 7) quantiles."""
    arr = np.asarray(values, dtype=float)
    return [float(np.quantile(arr, p)) for p in probs]


def _stats(values) -> MeasureStats:
    arr = np.asarray(values, dtype=float)
    n = len(arr)
    q25, med, q75 = quantiles(arr, (0.25, 0.5, 0.75))
    mean = float(np.mean(arr))
    if n >= 2:
        half = 1.959963984540054 * float(np.std(arr, ddof=1)) / math.sqrt(n)
        ci = (mean - half, mean + half)
    else:
        ci = (math.nan, math.nan)
    return MeasureStats(n=n, median=med, q25=q25, q75=q75, mean=mean, ci_low=ci[0], ci_high=ci[1])


def _measure_values(rows: list[MeasureSet], name: str) -> tuple[list[float], int]:
    """Finite values of one measure plus the count of excluded rows."""
    values, excluded = [], 0
    for row in rows:
        if name == "eif":
            v = math.exp(row.log_eif) if row.log_eif < 700.0 else math.inf
        else:
            v = getattr(row, name)
        if v is None or not math.isfinite(v):
            excluded += 1
            continue
        values.append(float(v))
    return values, excluded


def field_summary(rows: list[MeasureSet], field_name: str) -> FieldSummary:
    """Summaries for one field: location stats, significance and BF proportions.

    Non-finite evidence inflation factors (overflow past double precision)
    and undefined per-MA overestimation factors are excluded from their own
    summaries, with the counts reported. The aggregate overestimation factor
    is the ratio of means with a delta-method interval, which is reported
    alongside (never conflated with) the per-MA ratio summaries.
    """
    group = [r for r in rows if r.field == field_name]
    if not group:
        raise ValueError(f"no rows for field {field_name!r}")

    stats: dict[str, MeasureStats] = {}
    eif_omitted = of_excluded = 0
    for name in SUMMARY_MEASURES:
        values, excluded = _measure_values(group, name)
        if name == "eif":
            eif_omitted = excluded
        elif name == "of":
            of_excluded = excluded
        if values:
            stats[name] = _stats(values)

    converged = [r for r in group if r.reml_converged]
    prop_significant = (
        sum(r.reml_significant for r in converged) / len(converged) if converged else None
    )

    k = len(group)
    prop_bf = {}
    for tag, attr in (("adj", "log_bf10_adj"), ("unadj", "log_bf10_unadj"), ("psb", "log_bf_psb")):
        logs = [getattr(r, attr) for r in group]
        prop_bf[f"{tag}_gt_3"] = sum(v > LOG_3 for v in logs) / k
        prop_bf[f"{tag}_gt_10"] = sum(v > LOG_10 for v in logs) / k
        prop_bf[f"{tag}_lt_third"] = sum(v < -LOG_3 for v in logs) / k
        prop_bf[f"{tag}_lt_tenth"] = sum(v < -LOG_10 for v in logs) / k

    pairs = [(r.y_bar, r.mu_adj) for r in group if r.mu_adj is not None]
    of_aggregate = None
    if len(pairs) >= 2:
        try:
            of_aggregate = overestimation_factor([p[0] for p in pairs], [p[1] for p in pairs])
        except ValueError:
            of_aggregate = None

    return FieldSummary(
        field=field_name,
        n_mas=k,
        stats=stats,
        prop_significant=prop_significant,
        reml_nonconverged=k - len(converged),
        prop_bf=prop_bf,
        of_aggregate=of_aggregate,
        eif_omitted=eif_omitted,
        of_excluded=of_excluded,
    )


def summarize_fields(rows: list[MeasureSet]) -> list[FieldSummary]:
    fields = sorted({r.field for r in rows})
    return [field_summary(rows, f) for f in fields]


def kbin_table(rows: list[MeasureSet], measure: str, stat: str = "median") -> list[dict]:
    """One row per field per size bin, empty bins included with blank stats."""
    if not rows:
        raise ValueError("no measure rows")
    if stat not in ("median", "mean"):
        raise ValueError("stat must be 'median' or 'mean'")
    out = []
    for field_name in sorted({r.field for r in rows}):
        group = [r for r in rows if r.field == field_name]
        for label, lo, hi in K_BINS:
            binned = [r for r in group if lo <= r.n_estimates < hi]
            values, _ = _measure_values(binned, measure)
            record = {"field": field_name, "bin": label, "count": len(binned)}
            if values:
                s = _stats(values)
                if stat == "median":
                    record.update({"median": s.median, "q25": s.q25, "q75": s.q75})
                else:
                    record.update({"mean": s.mean, "ci_low": s.ci_low, "ci_high": s.ci_high})
            else:
                blank = ("median", "q25", "q75") if stat == "median" else ("mean", "ci_low", "ci_high")
                record.update({k: None for k in blank})
            out.append(record)
    return out


@dataclass(frozen=True)
class DensitySummary:
    """Quantiles plus a kernel density estimate for violin-style plotting."""

    median: float
    q25: float
    q75: float
    grid: tuple[float, ...]
    density: tuple[float, ...]


def density_summary(values, grid_size: int = 128) -> DensitySummary:
    """Gaussian KDE with the Silverman bandwidth on a uniform [min, max] grid.

    The density is renormalized so its trapezoid integral over the grid is 1
    (boundary kernels would otherwise leak mass outside the data range).
    """
    arr = np.asarray(values, dtype=float)
    if len(arr) < 2:
        raise ValueError("need at least two values")
    if grid_size < 2:
        raise ValueError("grid must have at least two points")
    sd = float(np.std(arr, ddof=1))
    if sd == 0.0:
        raise ValueError("values are all identical; no density to estimate")
    q25, med, q75 = quantiles(arr, (0.25, 0.5, 0.75))
    iqr = q75 - q25
    spread = min(sd, iqr / 1.34) if iqr > 0.0 else sd
    bandwidth = 0.9 * spread * len(arr) ** (-0.2)

    grid = np.linspace(float(np.min(arr)), float(np.max(arr)), grid_size)
    z = (grid[:, None] - arr[None, :]) / bandwidth
    density = np.mean(np.exp(-0.5 * z * z), axis=1) / (bandwidth * math.sqrt(2.0 * math.pi))
    density /= np.trapezoid(density, grid)
    return DensitySummary(
        median=med,
        q25=q25,
        q75=q75,
        grid=tuple(float(g) for g in grid),
        density=tuple(float(d) for d in density),
    )
