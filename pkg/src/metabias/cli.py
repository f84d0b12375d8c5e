"""Batch command-line interface: convert, validate, fit, batch, summarize, simulate.

Exit codes: 0 success, 1 input error, 2 numerical failure, 64 usage error.
Every artifact-writing command stamps its output directory with a single
run manifest. All randomness flows from one ``--seed``; batch outputs are
reduced in meta-analysis id order so they are identical for any ``--jobs``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import metabias
from metabias import aggregate, ingest, measures, simgen
from metabias.effectsize import Metric, convert_with_se
from metabias.ensemble import SpaceConfig, default_model_space
from metabias.ingest import IngestError, Schema
from metabias.inference import AnalysisResult, FitError, IntegrationSettings, analyze

log = logging.getLogger("metabias")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: D401 - argparse hook
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    inputs: list[str]
    version: str
    wall_time_s: float
    warnings: list[str]

    def write(self, out_dir: Path) -> None:
        payload = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "inputs": self.inputs,
            "tool_version": self.version,
            "wall_time_s": self.wall_time_s,
            "warnings": self.warnings,
        }
        with open(out_dir / "manifest.json", "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")


def _config_hash(path: str | None) -> str:
    if path is None:
        return "none"
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_space_config(path: str | None) -> SpaceConfig:
    if path is None:
        return SpaceConfig()
    with open(path, encoding="utf-8") as handle:
        return SpaceConfig.from_dict(json.load(handle))


def _settings(args) -> IntegrationSettings:
    kwargs = {"seed": args.seed}
    if getattr(args, "nodes", None):
        kwargs["quadrature_nodes"] = args.nodes
    if getattr(args, "samples", None):
        kwargs["is_samples"] = args.samples
    return IntegrationSettings(**kwargs)


def _json_dump(payload, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_parser() -> _Parser:
    parser = _Parser(prog="metabias", description=__doc__)
    parser.add_argument("--version", action="version", version=f"metabias {metabias.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    conv = sub.add_parser("convert", help="stream effect-size conversions from a precomputed CSV")
    conv.add_argument("--input", required=True)
    conv.add_argument("--to", required=True, choices=[m.value for m in Metric])
    conv.add_argument("--out-dir", default=None)

    val = sub.add_parser("validate", help="run ingest filters and print the filter report")
    val.add_argument("--input", required=True)
    val.add_argument("--schema", default="precomputed", choices=[s.value for s in Schema])

    fit = sub.add_parser("fit", help="fit one meta-analysis and write the result JSON")
    fit.add_argument("--input", required=True)
    fit.add_argument("--schema", default="precomputed", choices=[s.value for s in Schema])
    fit.add_argument("--ma", required=True, help="meta-analysis id to fit")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--config", default=None)
    fit.add_argument("--nodes", type=int, default=None)
    fit.add_argument("--samples", type=int, default=None)
    fit.add_argument("--out-dir", default=None)

    batch = sub.add_parser("batch", help="fit every meta-analysis and write the measures CSV")
    batch.add_argument("--input", required=True)
    batch.add_argument("--schema", default="precomputed", choices=[s.value for s in Schema])
    batch.add_argument("--seed", type=int, default=0)
    batch.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    batch.add_argument("--config", default=None)
    batch.add_argument("--nodes", type=int, default=None)
    batch.add_argument("--samples", type=int, default=None)
    batch.add_argument("--out-dir", required=True)

    summ = sub.add_parser("summarize", help="aggregate a measures CSV into summary tables")
    summ.add_argument("--input", required=True, help="measures CSV from `batch`")
    summ.add_argument("--out-dir", required=True)
    summ.add_argument("--format", default="json", choices=["csv", "json"])

    sim = sub.add_parser("simulate", help="write a synthetic corpus from a simulation config")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    sim.add_argument("--out-dir", required=True)
    return parser


# ---------------------------------------------------------------------------
# Commands


def _cmd_convert(args) -> int:
    target = Metric.from_tag(args.to)
    rows_out = []
    with open(args.input, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        expected = ("ma_id", "study_id", "metric", "value", "se")
        missing = [c for c in expected if c not in (reader.fieldnames or ())]
        if missing:
            raise IngestError(f"missing columns: {missing}", line=1)
        for line, record in enumerate(reader, start=2):
            metric = Metric.from_tag(record["metric"])
            y, se = convert_with_se(float(record["value"]), float(record["se"]), metric, target)
            rows_out.append([record["ma_id"], record["study_id"], target.value, repr(y), repr(se)])

    def emit(stream) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["ma_id", "study_id", "metric", "value", "se"])
        writer.writerows(rows_out)

    if args.out_dir is None:
        emit(sys.stdout)
    else:
        out = _out_dir(args)
        with open(out / "converted.csv", "w", newline="", encoding="utf-8") as handle:
            emit(handle)
    return EXIT_OK


def _cmd_validate(args) -> int:
    ds = ingest.load_dataset(args.input, Schema(args.schema))
    _, report = ingest.validate_and_filter(ds)
    print(report.to_json())
    return EXIT_OK


def _cmd_fit(args) -> int:
    ds = ingest.load_dataset(args.input, Schema(args.schema))
    ds, _ = ingest.validate_and_filter(ds)
    matches = [ma for ma in ds.meta_analyses if ma.ma_id == args.ma]
    if not matches:
        raise IngestError(f"meta-analysis {args.ma!r} not found (or removed by filters)")
    space = default_model_space(_load_space_config(args.config))
    result = analyze(matches[0], space, _settings(args))
    doc = result.to_json_dict()
    if args.out_dir is None:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        out = _out_dir(args)
        _json_dump(doc, out / f"fit-{args.ma}.json")
    return EXIT_OK


def _analyze_one(payload) -> tuple[measures.MeasureSet, list[str]]:
    ma, config, settings = payload
    space = default_model_space(config)
    analysis = analyze(ma, space, settings)
    return measures.compute_measures(analysis), list(analysis.adjusted.failures)


def _cmd_batch(args) -> int:
    started = time.time()
    ds = ingest.load_dataset(args.input, Schema(args.schema))
    ds, report = ingest.validate_and_filter(ds)
    if not ds.meta_analyses:
        raise IngestError("no meta-analyses survive validation")
    config = _load_space_config(args.config)
    settings = _settings(args)
    mas = sorted(ds.meta_analyses, key=lambda ma: ma.ma_id)
    payloads = [(ma, config, settings) for ma in mas]
    jobs = max(1, args.jobs)
    if jobs == 1 or len(mas) == 1:
        results = [_analyze_one(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_analyze_one, payloads, chunksize=1))
    rows = [row for row, _ in results]
    warnings = [w for _, failures in results for w in failures]
    out = _out_dir(args)
    measures.write_measures_csv(rows, out / "measures.csv")
    _json_dump(report.to_json_dict(), out / "filter_report.json")
    RunManifest(
        command="batch",
        config_hash=_config_hash(args.config),
        seed=args.seed,
        inputs=[str(args.input)],
        version=metabias.__version__,
        wall_time_s=time.time() - started,
        warnings=warnings,
    ).write(out)
    log.info("batch: %d meta-analyses -> %s", len(rows), out / "measures.csv")
    return EXIT_OK


def _write_table_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        return
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([measures._format_cell(row.get(c)) for c in columns])


def _cmd_summarize(args) -> int:
    started = time.time()
    rows = measures.read_measures_csv(args.input)
    if not rows:
        raise IngestError("measures CSV has no rows")
    out = _out_dir(args)

    summaries = aggregate.summarize_fields(rows)
    _json_dump([s.to_json_dict() for s in summaries], out / "field_summary.json")

    kbin_rows: list[dict] = []
    for measure in ("y_bar", "post_effect_unadj", "post_psb", "seif", "bias", "of"):
        for stat in ("median", "mean"):
            for record in aggregate.kbin_table(rows, measure, stat):
                kbin_rows.append({"measure": measure, "stat": stat, **record})
    _json_dump(kbin_rows, out / "kbin_tables.json")

    violins = {}
    for measure in ("post_effect_adj", "post_effect_unadj", "post_psb", "seif"):
        per_field = {}
        for summary in summaries:
            values = [
                getattr(r, measure) for r in rows
                if r.field == summary.field and getattr(r, measure) is not None
            ]
            if len(values) >= 2 and len(set(values)) > 1:
                per_field[summary.field] = dataclasses.asdict(aggregate.density_summary(values))
        violins[measure] = per_field
    _json_dump(violins, out / "violin_data.json")

    if args.format == "csv":
        flat = []
        for s in summaries:
            row = {"field": s.field, "n_mas": s.n_mas, "prop_significant": s.prop_significant}
            for name, st in s.stats.items():
                for key in ("median", "q25", "q75", "mean", "ci_low", "ci_high"):
                    row[f"{name}_{key}"] = getattr(st, key)
            for key, value in s.prop_bf.items():
                row[f"prop_bf_{key}"] = value
            if s.of_aggregate:
                row["of_aggregate"], row["of_ci_low"], row["of_ci_high"] = s.of_aggregate
            flat.append(row)
        _write_table_csv(flat, out / "field_summary.csv")
        _write_table_csv(kbin_rows, out / "kbin_tables.csv")

    RunManifest(
        command="summarize",
        config_hash="none",
        seed=None,
        inputs=[str(args.input)],
        version=metabias.__version__,
        wall_time_s=time.time() - started,
        warnings=[],
    ).write(out)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    started = time.time()
    with open(args.config, encoding="utf-8") as handle:
        cfg = simgen.SimConfig.from_dict(json.load(handle))
    if args.seed is not None:
        cfg = simgen.SimConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    dataset, truths = simgen.simulate_corpus(cfg)
    out = _out_dir(args)
    simgen.write_corpus_csv(dataset, out / "corpus.csv")
    simgen.write_truth_json(cfg, truths, out / "truth.json")
    RunManifest(
        command="simulate",
        config_hash=_config_hash(args.config),
        seed=cfg.seed,
        inputs=[str(args.config)],
        version=metabias.__version__,
        wall_time_s=time.time() - started,
        warnings=[],
    ).write(out)
    return EXIT_OK


_COMMANDS = {
    "convert": _cmd_convert,
    "validate": _cmd_validate,
    "fit": _cmd_fit,
    "batch": _cmd_batch,
    "summarize": _cmd_summarize,
    "simulate": _cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("METABIAS_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (IngestError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        sys.stderr.write(f"metabias: input error: {exc}\n")
        return EXIT_INPUT
    except (FitError, FloatingPointError) as exc:
        sys.stderr.write(f"metabias: numerical failure: {exc}\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
