"""Standardized effect sizes: computation, metric conversion, p-values.

All conversions are routed through the correlation coefficient, so chained
conversions are path-independent. Standard errors are propagated with the
first-order delta method using the analytic derivative of each conversion.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from scipy.special import ndtr

SQRT3_OVER_PI = math.sqrt(3.0) / math.pi


class Metric(enum.Enum):
    """Effect-size metric carried by an estimate."""

    COHEN_D = "d"
    CORRELATION_R = "r"
    LOG_OR = "logor"
    FISHER_Z = "z"

    @classmethod
    def from_tag(cls, tag: str) -> "Metric":
        try:
            return cls(tag.strip().lower())
        except ValueError:
            raise ValueError(f"unknown metric tag {tag!r}") from None


@dataclass(frozen=True)
class Estimate:
    """One primary-study effect size with its standard error."""

    y: float
    se: float
    metric: Metric
    study_id: str = ""

    def __post_init__(self) -> None:
        if not math.isfinite(self.y):
            raise ValueError(f"effect value must be finite, got {self.y}")
        if not (self.se > 0.0 and math.isfinite(self.se)):
            raise ValueError(f"standard error must be positive, got {self.se}")
        if self.metric is Metric.CORRELATION_R and abs(self.y) >= 1.0:
            raise ValueError(f"correlation must satisfy |r| < 1, got {self.y}")


@dataclass(frozen=True)
class TwoByTwo:
    """Event counts for a dichotomous outcome (treatment and control arms)."""

    events_t: int
    n_t: int
    events_c: int
    n_c: int

    def __post_init__(self) -> None:
        for events, n, arm in ((self.events_t, self.n_t, "treatment"), (self.events_c, self.n_c, "control")):
            if events < 0 or n < 0:
                raise ValueError(f"negative count in {arm} arm")
            if events > n:
                raise ValueError(f"events exceed arm size in {arm} arm")
            if n <= 1:
                raise ValueError(f"{arm} arm has {n} participants; arms with <= 1 are rejected upstream")


@dataclass(frozen=True)
class ContinuousArms:
    """Summary statistics for a continuous outcome in two arms."""

    mean_t: float
    sd_t: float
    n_t: int
    mean_c: float
    sd_c: float
    n_c: int

    def __post_init__(self) -> None:
        if self.sd_t <= 0.0 or self.sd_c <= 0.0:
            raise ValueError("arm standard deviations must be strictly positive")
        if self.n_t <= 1 or self.n_c <= 1:
            raise ValueError("arm sizes must exceed 1")


def _check_value(y: float, metric: Metric) -> None:
    if not math.isfinite(y):
        raise ValueError(f"non-finite effect value {y}")
    if metric is Metric.CORRELATION_R and abs(y) >= 1.0:
        raise ValueError(f"correlation must satisfy |r| < 1, got {y}")


def _to_r(y: float, metric: Metric) -> tuple[float, float]:
    """Map a value to the correlation scale; returns (r, dr/dy)."""
    if metric is Metric.CORRELATION_R:
        return y, 1.0
    if metric is Metric.FISHER_Z:
        r = math.tanh(y)
        return r, 1.0 - r * r
    if metric is Metric.COHEN_D:
        # r = d / sqrt(d^2 + 4), equal-group convention a = 4
        s = math.sqrt(y * y + 4.0)
        return y / s, 4.0 / (s * s * s)
    # LOG_OR -> d is linear, then d -> r
    d = y * SQRT3_OVER_PI
    r, dr_dd = _to_r(d, Metric.COHEN_D)
    return r, dr_dd * SQRT3_OVER_PI


def _from_r(r: float, metric: Metric) -> tuple[float, float]:
    """Map a correlation to the target scale; returns (value, dvalue/dr)."""
    if metric is Metric.CORRELATION_R:
        return r, 1.0
    if metric is Metric.FISHER_Z:
        return math.atanh(r), 1.0 / (1.0 - r * r)
    if metric is Metric.COHEN_D:
        one_minus = 1.0 - r * r
        d = 2.0 * r / math.sqrt(one_minus)
        return d, 2.0 / one_minus ** 1.5
    d, dd_dr = _from_r(r, Metric.COHEN_D)
    return d / SQRT3_OVER_PI, dd_dr / SQRT3_OVER_PI


def convert_point(y: float, from_metric: Metric, to_metric: Metric) -> float:
    """Convert an effect value between metrics (identity when equal)."""
    _check_value(y, from_metric)
    if from_metric is to_metric:
        return y
    r, _ = _to_r(y, from_metric)
    value, _ = _from_r(r, to_metric)
    return value


def convert_with_se(y: float, se: float, from_metric: Metric, to_metric: Metric) -> tuple[float, float]:
    """Convert a value and its standard error between metrics.

    The converted se comes from the first-order delta method with the
    analytic derivative of the conversion chain.
    """
    _check_value(y, from_metric)
    if not (se > 0.0 and math.isfinite(se)):
        raise ValueError(f"standard error must be positive, got {se}")
    if from_metric is to_metric:
        return y, se
    r, dr_dy = _to_r(y, from_metric)
    value, dv_dr = _from_r(r, to_metric)
    return value, se * abs(dv_dr * dr_dy)


def smd_from_continuous(arms: ContinuousArms, study_id: str = "") -> Estimate:
    """Bias-corrected standardized mean difference from two-arm summaries.

    Applies the small-sample correction J = 1 - 3/(4*df - 1) to the raw
    standardized difference; the variance uses the standard large-sample
    formula with the corrected value.
    """
    df = arms.n_t + arms.n_c - 2
    s_pooled = math.sqrt(
        ((arms.n_t - 1) * arms.sd_t**2 + (arms.n_c - 1) * arms.sd_c**2) / df
    )
    if s_pooled == 0.0:
        raise ValueError("pooled standard deviation is zero")
    correction = 1.0 - 3.0 / (4.0 * df - 1.0)
    d = correction * (arms.mean_t - arms.mean_c) / s_pooled
    var = 1.0 / arms.n_t + 1.0 / arms.n_c + d * d / (2.0 * (arms.n_t + arms.n_c))
    return Estimate(y=d, se=math.sqrt(var), metric=Metric.COHEN_D, study_id=study_id)


def logor_from_counts(table: TwoByTwo, study_id: str = "") -> Estimate:
    """Log odds ratio from a 2x2 table with the 1/2 zero-cell correction.

    When any of the four cells (events / non-events per arm) is zero,
    0.5 is added to all four cells before applying the formula.
    """
    a = float(table.events_t)
    b = float(table.n_t - table.events_t)
    c = float(table.events_c)
    d = float(table.n_c - table.events_c)
    if min(a, b, c, d) == 0.0:
        a, b, c, d = a + 0.5, b + 0.5, c + 0.5, d + 0.5
    logor = math.log((a * d) / (b * c))
    se = math.sqrt(1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d)
    return Estimate(y=logor, se=se, metric=Metric.LOG_OR, study_id=study_id)


def one_sided_p(y: float, se: float) -> float:
    """One-sided p-value 1 - Phi(y/se); values above 0.5 mean a negative effect."""
    if not (se > 0.0 and math.isfinite(se)):
        raise ValueError(f"standard error must be positive, got {se}")
    return float(ndtr(-y / se))
