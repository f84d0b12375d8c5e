"""Footprint-of-bias measures derived from adjusted and unadjusted fits.

Evidence ratios are carried in natural logs end to end; linear values are
materialized only when they fit comfortably in a double.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

LOG_10 = math.log(10.0)
_LABELS = ("strong-null", "moderate-null", "weak-null", "weak", "moderate", "strong")
_LABEL_EDGES = (-math.log(10.0), -math.log(3.0), 0.0, math.log(3.0), math.log(10.0))


def eif(bf_unadj: float | None = None, bf_adj: float | None = None,
        *, log_bf_unadj: float | None = None, log_bf_adj: float | None = None) -> tuple[float, float]:
    """Evidence inflation factor: unadjusted over adjusted Bayes factor.

    Accepts either linear or log-space inputs; returns (ratio, log ratio).
    The ratio overflows to inf for extreme magnitudes, the log never does.
    """
    if log_bf_unadj is None:
        if bf_unadj is None or bf_unadj <= 0.0:
            raise ValueError("Bayes factors must be positive")
        log_bf_unadj = math.log(bf_unadj)
    if log_bf_adj is None:
        if bf_adj is None or bf_adj <= 0.0:
            raise ValueError("Bayes factors must be positive")
        log_bf_adj = math.log(bf_adj)
    log_ratio = log_bf_unadj - log_bf_adj
    ratio = math.exp(log_ratio) if log_ratio < 700.0 else math.inf
    return ratio, log_ratio


def seif(eif_log: float, n: int) -> float:
    """Per-estimate evidence inflation: the N-th root of the EIF."""
    if n < 1:
        raise ValueError("the number of estimates must be at least 1")
    return math.exp(eif_log / n)


def absolute_bias(y_bar: float, mu_adj: float) -> float:
    """Signed excess of the naive mean effect over the adjusted estimate."""
    return y_bar - mu_adj


def overestimation_factor(y_bars, mu_adjs) -> tuple[float, float, float]:
    """Ratio of mean naive effects to mean adjusted effects, with a 95% CI.

    The interval uses the first-order delta method for a ratio of two
    sample means with their sample covariance.
    """
    a = np.asarray(y_bars, dtype=float)
    b = np.asarray(mu_adjs, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length vectors")
    k = len(a)
    if k < 2:
        raise ValueError("need at least two meta-analyses")
    abar, bbar = float(np.mean(a)), float(np.mean(b))
    if abs(bbar) < 1e-12:
        raise ValueError("denominator mean is numerically zero")
    of = abar / bbar
    var_a = float(np.var(a, ddof=1)) / k
    var_b = float(np.var(b, ddof=1)) / k
    cov = float(np.cov(a, b, ddof=1)[0, 1]) / k
    var_of = var_a / bbar**2 + abar**2 * var_b / bbar**4 - 2.0 * abar * cov / bbar**3
    half = 1.959963984540054 * math.sqrt(max(var_of, 0.0))
    return of, of - half, of + half


def per_ma_of(y_bar: float, mu_adj: float) -> float:
    """Per-meta-analysis overestimation factor (may be extreme or negative).

    A tiny adjusted estimate of the opposite sign produces huge negative
    ratios; the value is passed through unmodified. A zero denominator
    yields NaN, which summaries exclude and count.
    """
    if mu_adj == 0.0:
        return math.nan
    return y_bar / mu_adj


def evidence_label(bf: float | None = None, *, log_bf: float | None = None) -> str:
    """Verbal evidence category for a Bayes factor.

    Bins (lower-inclusive): <1/10 strong-null, [1/10,1/3) moderate-null,
    [1/3,1) weak-null, [1,3) weak, [3,10) moderate, >=10 strong.
    """
    if log_bf is None:
        if bf is None or bf <= 0.0:
            raise ValueError("Bayes factor must be positive")
        log_bf = math.log(bf)
    for edge, label in zip(_LABEL_EDGES, _LABELS):
        if log_bf < edge:
            return label
    return _LABELS[-1]


@dataclass(frozen=True)
class MeasureSet:
    """Per-meta-analysis footprint measures, one flat row."""

    ma_id: str
    field: str
    n_estimates: int
    y_bar: float
    mu_adj: float | None
    bias: float | None
    of: float | None
    log_eif: float
    seif: float
    post_effect_adj: float
    post_effect_unadj: float
    post_psb: float
    log_bf10_adj: float
    log_bf10_unadj: float
    log_bf_psb: float
    label_bf10_adj: str
    label_bf10_unadj: str
    label_bf_psb: str
    reml_p: float
    reml_significant: bool
    reml_converged: bool
    flipped: bool

    def to_row(self) -> dict:
        return asdict(self)


CSV_COLUMNS = tuple(MeasureSet.__dataclass_fields__)


def compute_measures(analysis) -> MeasureSet:
    """Assemble the measure row for one analyzed meta-analysis."""
    adj, unadj = analysis.adjusted, analysis.unadjusted
    _, log_eif = eif(log_bf_unadj=unadj.log_bf_effect, log_bf_adj=adj.log_bf_effect)
    mu_adj = adj.mu_conditional[0] if adj.mu_conditional is not None else None
    bias = absolute_bias(analysis.y_bar_d, mu_adj) if mu_adj is not None else None
    of = per_ma_of(analysis.y_bar_d, mu_adj) if mu_adj is not None else None
    return MeasureSet(
        ma_id=analysis.ma_id,
        field=analysis.field,
        n_estimates=analysis.n_estimates,
        y_bar=analysis.y_bar_d,
        mu_adj=mu_adj,
        bias=bias,
        of=of,
        log_eif=log_eif,
        seif=seif(log_eif, analysis.n_estimates),
        post_effect_adj=adj.post_effect,
        post_effect_unadj=unadj.post_effect,
        post_psb=adj.post_psb,
        log_bf10_adj=adj.log_bf_effect,
        log_bf10_unadj=unadj.log_bf_effect,
        log_bf_psb=adj.log_bf_psb,
        label_bf10_adj=evidence_label(log_bf=adj.log_bf_effect),
        label_bf10_unadj=evidence_label(log_bf=unadj.log_bf_effect),
        label_bf_psb=evidence_label(log_bf=adj.log_bf_psb),
        reml_p=analysis.reml.p_value,
        reml_significant=analysis.reml.significant,
        reml_converged=analysis.reml.converged,
        flipped=adj.flipped,
    )


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_measures_csv(rows: list[MeasureSet], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            record = row.to_row()
            writer.writerow([_format_cell(record[c]) for c in CSV_COLUMNS])


def _parse_cell(name: str, text: str):
    if text == "":
        return None
    if name in ("reml_significant", "reml_converged", "flipped"):
        return text == "true"
    if name in ("ma_id", "field") or name.startswith("label_"):
        return text
    if name == "n_estimates":
        return int(text)
    return float(text)


def read_measures_csv(path) -> list[MeasureSet]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"measure CSV is missing columns: {sorted(missing)}")
        return [
            MeasureSet(**{name: _parse_cell(name, record[name]) for name in CSV_COLUMNS})
            for record in reader
        ]
