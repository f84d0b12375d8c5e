"""Model-averaged meta-analysis with publication-bias adjustment.

Fits ensembles of random-effects meta-analytic models that cross
effect / heterogeneity / publication-bias components (selection models
and regression-based small-study adjustments), computes inclusion Bayes
factors and bias-footprint measures per meta-analysis, and aggregates
them into field-level summary tables.
"""

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
from metabias.remeta import RemlFit, pool, reml_fit, reml_tau2, unweighted_mean, wald_test
from metabias.ensemble import (
    BiasComponent,
    BiasKind,
    ModelSpec,
    SpaceConfig,
    WeightFunction,
    default_model_space,
    log_likelihood,
    log_prior_density,
    selection_normalizer,
    weight_at,
)
from metabias.inference import (
    AnalysisResult,
    FitError,
    FitResult,
    IntegrationSettings,
    Partition,
    analyze,
    conditional_effect_estimate,
    fit_ensemble,
    inclusion_bf,
    inflation_curve,
    log_marginal_likelihood,
    publication_probability_curve,
    unadjusted_fit,
)
from metabias.measures import (
    MeasureSet,
    absolute_bias,
    compute_measures,
    eif,
    evidence_label,
    overestimation_factor,
    per_ma_of,
    seif,
)
from metabias.ingest import Dataset, FilterReport, IngestError, MetaAnalysis, Schema, load_dataset, validate_and_filter
from metabias.simgen import SimConfig, simulate_corpus, simulate_ma
from metabias.aggregate import FieldSummary, K_BINS, density_summary, field_summary, kbin_table

__version__ = "0.1.0"
