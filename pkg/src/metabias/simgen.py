"""Synthetic meta-analysis corpora with a configurable selection mechanism.

Each meta-analysis draws study effects around a common mean, observes them
with sampling noise derived from per-arm sample sizes, and publishes each
observation with the probability its one-sided p-value receives from the
configured weight function. Generation uses a counter-based (Philox)
generator keyed by (seed, meta-analysis index), so corpora are reproducible
across platforms and independent of scheduling.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from metabias.effectsize import Estimate, Metric, one_sided_p
from metabias.ensemble import WeightFunction, weight_at
from metabias.ingest import Dataset, MetaAnalysis, Provenance

_MAX_DRAWS = 10**6


class SimulationError(RuntimeError):
    """Selection so extreme that no draw was published within the cap."""


ALL_PUBLISHED = WeightFunction("one", (0.05,), (1.0, 1.0))


@dataclass(frozen=True)
class SimConfig:
    """Ground-truth configuration for a synthetic corpus.

    ``true_mu`` and ``true_tau`` are on the standardized mean difference
    scale; per-study standard errors come from the standard SMD variance
    formula with two equal arms of the sampled size.
    """

    true_mu: float = 0.0
    true_tau: float = 0.0
    n_studies_range: tuple[int, int] = (10, 30)
    arm_size_range: tuple[int, int] = (20, 200)
    selection: WeightFunction = ALL_PUBLISHED
    n_mas: int = 100
    seed: int = 0
    field: str = "simulated"

    def __post_init__(self) -> None:
        if self.true_tau < 0.0:
            raise ValueError("true_tau must be non-negative")
        for name in ("n_studies_range", "arm_size_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < (3 if name == "n_studies_range" else 2):
                raise ValueError(f"invalid {name}: ({lo}, {hi})")
        if self.n_mas < 1:
            raise ValueError("n_mas must be positive")

    @classmethod
    def from_dict(cls, payload: dict) -> "SimConfig":
        payload = dict(payload)
        sel = payload.pop("selection", None)
        kwargs = {}
        for key in ("true_mu", "true_tau"):
            if key in payload:
                kwargs[key] = float(payload.pop(key))
        for key in ("n_studies_range", "arm_size_range"):
            if key in payload:
                lo, hi = payload.pop(key)
                kwargs[key] = (int(lo), int(hi))
        for key in ("n_mas", "seed"):
            if key in payload:
                kwargs[key] = int(payload.pop(key))
        if "field" in payload:
            kwargs["field"] = str(payload.pop("field"))
        if payload:
            raise ValueError(f"unknown simulation config keys: {sorted(payload)}")
        if sel is not None:
            kwargs["selection"] = WeightFunction(
                sel["sides"], tuple(sel["cutpoints"]), tuple(sel["weights"])
            )
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "true_mu": self.true_mu,
            "true_tau": self.true_tau,
            "n_studies_range": list(self.n_studies_range),
            "arm_size_range": list(self.arm_size_range),
            "selection": {
                "sides": self.selection.sides,
                "cutpoints": list(self.selection.cutpoints),
                "weights": list(self.selection.weights),
            },
            "n_mas": self.n_mas,
            "seed": self.seed,
            "field": self.field,
        }


@dataclass(frozen=True)
class TruthRecord:
    """What the generator actually did for one meta-analysis."""

    ma_id: str
    true_mu: float
    true_tau: float
    n_published: int
    n_draws: int
    n_rejected: int


def _rng(seed: int, ma_index: int) -> np.random.Generator:
    key = np.array([seed % 2**64, ma_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def smd_se(effect: float, arm_size: int) -> float:
    """Standard error of a two-arm SMD with equal arm sizes."""
    return math.sqrt(2.0 / arm_size + effect * effect / (4.0 * arm_size))


def simulate_ma(cfg: SimConfig, ma_index: int) -> tuple[MetaAnalysis, TruthRecord]:
    """Draw one meta-analysis until its target published count is reached."""
    rng = _rng(cfg.seed, ma_index)
    target = int(rng.integers(cfg.n_studies_range[0], cfg.n_studies_range[1] + 1))
    ma_id = f"sim-{ma_index:05d}"
    estimates: list[Estimate] = []
    draws = 0
    while len(estimates) < target:
        if draws >= _MAX_DRAWS:
            raise SimulationError(
                f"{ma_id}: no publishable draw within {_MAX_DRAWS} attempts"
            )
        draws += 1
        arm = int(rng.integers(cfg.arm_size_range[0], cfg.arm_size_range[1] + 1))
        theta = cfg.true_mu + cfg.true_tau * rng.standard_normal()
        se = smd_se(theta, arm)
        y = theta + se * rng.standard_normal()
        # extreme draws can underflow the p-value to exactly 0 or 1
        p = min(max(one_sided_p(y, se), 1e-300), 1.0 - 1e-16)
        accept_prob = weight_at(cfg.selection, p)
        if rng.uniform() < accept_prob:
            estimates.append(
                Estimate(y=y, se=se, metric=Metric.COHEN_D, study_id=f"{ma_id}-s{draws:07d}")
            )
    ma = MetaAnalysis(
        ma_id=ma_id,
        field=cfg.field,
        estimates=estimates,
        provenance=[Provenance(Metric.COHEN_D, 0) for _ in estimates],
    )
    truth = TruthRecord(
        ma_id=ma_id,
        true_mu=cfg.true_mu,
        true_tau=cfg.true_tau,
        n_published=len(estimates),
        n_draws=draws,
        n_rejected=draws - len(estimates),
    )
    return ma, truth


def simulate_corpus(cfg: SimConfig) -> tuple[Dataset, list[TruthRecord]]:
    """Generate the full corpus; meta-analyses are independent given the seed."""
    mas, truths = [], []
    for index in range(cfg.n_mas):
        ma, truth = simulate_ma(cfg, index)
        mas.append(ma)
        truths.append(truth)
    dataset = Dataset(meta_analyses=mas, rows_in=sum(len(m.estimates) for m in mas))
    return dataset, truths


def write_corpus_csv(dataset: Dataset, path) -> None:
    """Emit a corpus in the precomputed-estimate schema (SMD metric)."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["ma_id", "study_id", "metric", "value", "se", "field"])
        for ma in dataset.meta_analyses:
            for est in ma.estimates:
                writer.writerow([ma.ma_id, est.study_id, "d", repr(est.y), repr(est.se), ma.field])


def write_truth_json(cfg: SimConfig, truths: list[TruthRecord], path) -> None:
    payload = {
        "config": cfg.to_dict(),
        "meta_analyses": [
            {
                "ma_id": t.ma_id,
                "true_mu": t.true_mu,
                "true_tau": t.true_tau,
                "n_published": t.n_published,
                "n_draws": t.n_draws,
                "n_rejected": t.n_rejected,
            }
            for t in truths
        ],
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
