"""Dataset loading, effect-size normalization, and inclusion filters.

Input is UTF-8 delimited text with a declared header; one schema per file.
Every retained estimate is normalized to Fisher's z, keeping the original
metric and line number as provenance. Structural problems (bad headers,
unparseable numbers, unknown metric tags) raise; rows that merely violate
numeric preconditions are rejected and counted.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from collections import Counter
from dataclasses import dataclass, field

from metabias.effectsize import (
    ContinuousArms,
    Estimate,
    Metric,
    TwoByTwo,
    convert_with_se,
    logor_from_counts,
    smd_from_continuous,
)

DEFAULT_FIELD = "unspecified"


class Schema(enum.Enum):
    PRECOMPUTED = "precomputed"
    RAW_CONTINUOUS = "raw_continuous"
    RAW_DICHOTOMOUS = "raw_dichotomous"


_HEADERS = {
    Schema.PRECOMPUTED: ("ma_id", "study_id", "metric", "value", "se"),
    Schema.RAW_CONTINUOUS: ("ma_id", "study_id", "mean_t", "sd_t", "n_t", "mean_c", "sd_c", "n_c"),
    Schema.RAW_DICHOTOMOUS: ("ma_id", "study_id", "events_t", "n_t", "events_c", "n_c"),
}


class IngestError(ValueError):
    """Structural problem in an input file, with the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass(frozen=True)
class Provenance:
    """Where an estimate came from before normalization."""

    original_metric: Metric
    line: int


@dataclass
class MetaAnalysis:
    """One identified group of estimates, stored on the Fisher z scale."""

    ma_id: str
    field: str
    estimates: list[Estimate]
    provenance: list[Provenance] = field(default_factory=list)


@dataclass
class Dataset:
    """A collection of meta-analyses plus bookkeeping from loading."""

    meta_analyses: list[MetaAnalysis]
    rows_in: int = 0
    pending_rejections: list[tuple[int, str]] = field(default_factory=list)

    def n_estimates(self) -> int:
        return sum(len(ma.estimates) for ma in self.meta_analyses)


@dataclass
class FilterReport:
    """Counts of every removal applied while validating a dataset."""

    rows_in: int = 0
    estimates_kept: int = 0
    mas_kept: int = 0
    removed_estimates: Counter = field(default_factory=Counter)
    ma_too_small: int = 0

    def to_json_dict(self) -> dict:
        return {
            "rows_in": self.rows_in,
            "estimates_kept": self.estimates_kept,
            "mas_kept": self.mas_kept,
            "removed_estimates": dict(sorted(self.removed_estimates.items())),
            "ma_too_small": self.ma_too_small,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"unparseable numeric {text!r} in column {column}", line) from None


def _parse_int(text: str, column: str, line: int) -> int:
    value = _parse_float(text, column, line)
    if value != int(value):
        raise IngestError(f"expected an integer in column {column}, got {text!r}", line)
    return int(value)


def _precomputed_row(record: dict, line: int) -> tuple[Estimate, Metric]:
    try:
        metric = Metric.from_tag(record["metric"])
    except ValueError as exc:
        raise IngestError(str(exc), line) from None
    value = _parse_float(record["value"], "value", line)
    se = _parse_float(record["se"], "se", line)
    if not math.isfinite(value) or not math.isfinite(se):
        raise _RowReject("nonfinite_value")
    if se <= 0.0:
        raise _RowReject("se_nonpositive")
    if metric is Metric.CORRELATION_R and abs(value) >= 1.0:
        raise _RowReject("invalid_correlation")
    y, se_z = convert_with_se(value, se, metric, Metric.FISHER_Z)
    return Estimate(y=y, se=se_z, metric=Metric.FISHER_Z, study_id=record["study_id"]), metric


def _continuous_row(record: dict, line: int):
    n_t = _parse_int(record["n_t"], "n_t", line)
    n_c = _parse_int(record["n_c"], "n_c", line)
    if n_t <= 1 or n_c <= 1:
        raise _RowReject("arm_too_small")
    values = {k: _parse_float(record[k], k, line) for k in ("mean_t", "sd_t", "mean_c", "sd_c")}
    if any(not math.isfinite(v) for v in values.values()):
        raise _RowReject("nonfinite_value")
    if values["sd_t"] <= 0.0 or values["sd_c"] <= 0.0:
        raise _RowReject("invalid_arm")
    try:
        arms = ContinuousArms(values["mean_t"], values["sd_t"], n_t, values["mean_c"], values["sd_c"], n_c)
        est = smd_from_continuous(arms, study_id=record["study_id"])
    except ValueError:
        raise _RowReject("zero_pooled_sd") from None
    y, se_z = convert_with_se(est.y, est.se, Metric.COHEN_D, Metric.FISHER_Z)
    return Estimate(y=y, se=se_z, metric=Metric.FISHER_Z, study_id=est.study_id), Metric.COHEN_D


def _dichotomous_row(record: dict, line: int):
    counts = {k: _parse_int(record[k], k, line) for k in ("events_t", "n_t", "events_c", "n_c")}
    if counts["n_t"] <= 1 or counts["n_c"] <= 1:
        raise _RowReject("arm_too_small")
    try:
        table = TwoByTwo(counts["events_t"], counts["n_t"], counts["events_c"], counts["n_c"])
        est = logor_from_counts(table, study_id=record["study_id"])
    except ValueError:
        raise _RowReject("invalid_arm") from None
    y, se_z = convert_with_se(est.y, est.se, Metric.LOG_OR, Metric.FISHER_Z)
    return Estimate(y=y, se=se_z, metric=Metric.FISHER_Z, study_id=est.study_id), Metric.LOG_OR


class _RowReject(Exception):
    def __init__(self, reason: str):
        self.reason = reason


_ROW_PARSERS = {
    Schema.PRECOMPUTED: _precomputed_row,
    Schema.RAW_CONTINUOUS: _continuous_row,
    Schema.RAW_DICHOTOMOUS: _dichotomous_row,
}


def load_dataset(path, schema: Schema) -> Dataset:
    """Load one delimited file, converting every row to a Fisher z estimate.

    Rows violating numeric preconditions (non-positive se, degenerate
    correlations, arms with <= 1 participant, ...) are recorded as pending
    rejections for the filter report rather than raising.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise IngestError("no data rows")
        expected = _HEADERS[schema]
        missing = [c for c in expected if c not in reader.fieldnames]
        if missing:
            raise IngestError(f"missing columns for schema {schema.value}: {missing}", line=1)

        parser = _ROW_PARSERS[schema]
        groups: dict[str, MetaAnalysis] = {}
        rejections: list[tuple[int, str]] = []
        rows = 0
        for line, record in enumerate(reader, start=2):
            if all((v is None or str(v).strip() == "") for v in record.values()):
                continue
            rows += 1
            ma_id = (record.get("ma_id") or "").strip()
            if not ma_id:
                raise IngestError("empty ma_id", line)
            try:
                estimate, original = parser(record, line)
            except _RowReject as reject:
                rejections.append((line, reject.reason))
                continue
            field_label = (record.get("field") or DEFAULT_FIELD).strip() or DEFAULT_FIELD
            ma = groups.get(ma_id)
            if ma is None:
                ma = groups[ma_id] = MetaAnalysis(ma_id=ma_id, field=field_label, estimates=[])
            ma.estimates.append(estimate)
            ma.provenance.append(Provenance(original_metric=original, line=line))
        if rows == 0:
            raise IngestError("no data rows")
    return Dataset(meta_analyses=list(groups.values()), rows_in=rows, pending_rejections=rejections)


def validate_and_filter(ds: Dataset) -> tuple[Dataset, FilterReport]:
    """Apply the inclusion filters and account for every removal.

    Drops non-finite estimates and those with non-positive standard errors
    (for datasets assembled in code), then drops meta-analyses left with
    fewer than three estimates. Never fails.
    """
    report = FilterReport(rows_in=ds.rows_in)
    for line, reason in ds.pending_rejections:
        report.removed_estimates[reason] += 1

    kept_mas: list[MetaAnalysis] = []
    for ma in ds.meta_analyses:
        kept, prov = [], []
        provenance = ma.provenance or [None] * len(ma.estimates)
        for est, p in zip(ma.estimates, provenance):
            if not math.isfinite(est.y) or not math.isfinite(est.se) or est.se <= 0.0:
                report.removed_estimates["nonfinite_value"] += 1
                continue
            kept.append(est)
            prov.append(p)
        if len(kept) < 3:
            report.ma_too_small += 1
            report.removed_estimates["ma_too_small"] += len(kept)
            continue
        kept_mas.append(
            MetaAnalysis(ma_id=ma.ma_id, field=ma.field, estimates=kept,
                         provenance=[p for p in prov if p is not None])
        )

    report.estimates_kept = sum(len(ma.estimates) for ma in kept_mas)
    report.mas_kept = len(kept_mas)
    filtered = Dataset(meta_analyses=kept_mas, rows_in=report.estimates_kept, pending_rejections=[])
    return filtered, report
