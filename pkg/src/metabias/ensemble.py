"""Model space for bias-adjusted model-averaged meta-analysis.

The default space crosses three binary factors: presence of a mean effect,
presence of between-study heterogeneity, and presence of publication bias.
The bias factor expands into six step weight functions over p-value
intervals (selection models) plus two regressions of the effect on the
standard error (linear) or squared standard error (quadratic).

Weight-function intervals are ordered from most to least significant;
the most-significant interval always has weight 1 and the remaining
weights are parameterized as reversed cumulative sums of unit-Dirichlet
increments, which keeps them in (0, 1] and non-increasing.
"""

from __future__ import annotations

import enum
import math
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from math import lgamma

import numpy as np
from scipy.special import ndtr, ndtri

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Weight functions


@dataclass(frozen=True)
class WeightFunction:
    """Step function mapping p-value intervals to publication probabilities.

    ``weights[0]`` belongs to the most-significant interval and is fixed
    at 1; a p-value equal to a cutpoint falls in the less-significant
    interval.
    """

    sides: str  # "one" or "two"
    cutpoints: tuple[float, ...]
    weights: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.sides not in ("one", "two"):
            raise ValueError(f"sides must be 'one' or 'two', got {self.sides!r}")
        cuts = tuple(float(c) for c in self.cutpoints)
        if not cuts:
            raise ValueError("at least one cutpoint is required")
        if any(not 0.0 < c < 1.0 for c in cuts):
            raise ValueError("cutpoints must lie in (0, 1)")
        if any(a >= b for a, b in zip(cuts, cuts[1:])):
            raise ValueError("cutpoints must be strictly increasing")
        object.__setattr__(self, "cutpoints", cuts)
        if not self.weights:
            object.__setattr__(self, "weights", (1.0,) * (len(cuts) + 1))
            return
        w = tuple(float(x) for x in self.weights)
        if len(w) != len(cuts) + 1:
            raise ValueError("need one weight per p-value interval (cutpoints + 1)")
        if w[0] != 1.0:
            raise ValueError("the most-significant interval must have weight 1")
        # hard-zero weights are allowed for simulation configs and posterior
        # summaries; the prior support itself stays strictly positive
        if any(not 0.0 <= x <= 1.0 for x in w):
            raise ValueError("weights must lie in [0, 1]")
        object.__setattr__(self, "weights", w)

    @property
    def n_free(self) -> int:
        """Free weight parameters (Dirichlet increments) for this shape."""
        return len(self.cutpoints)

    def with_weights(self, weights) -> "WeightFunction":
        return replace(self, weights=tuple(float(w) for w in weights))

    def describe(self) -> str:
        cuts = "-".join(f"{c:g}" for c in self.cutpoints)
        return f"sel-{self.sides}-{cuts}"


def weight_at(wf: WeightFunction, p: float) -> float:
    """Publication weight of the interval containing the one-sided p-value."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if wf.sides == "two":
        p = 2.0 * min(p, 1.0 - p)
    return wf.weights[bisect_right(wf.cutpoints, p)]


def _interval_index(wf: WeightFunction, p: float) -> int:
    if wf.sides == "two":
        p = 2.0 * min(p, 1.0 - p)
    return bisect_right(wf.cutpoints, p)


class _SelectionGeometry:
    """Per-dataset effect-space boundaries of a weight function's intervals.

    For each estimate, p-value cutpoints are mapped to boundaries in the
    space of the observed effect; ``imap`` sends each effect-space interval
    (ascending) to the index of its weight.
    """

    def __init__(self, wf: WeightFunction, ses: np.ndarray):
        m = len(wf.cutpoints)
        cuts = np.asarray(wf.cutpoints)
        if wf.sides == "one":
            z = ndtri(1.0 - cuts)  # descending in the cut index
            self.bounds = ses[:, None] * z[::-1][None, :]  # ascending in y
            self.imap = np.arange(m, -1, -1)
        else:
            z = ndtri(1.0 - cuts / 2.0)
            pos = ses[:, None] * z[::-1][None, :]
            self.bounds = np.concatenate([-pos[:, ::-1], pos], axis=1)
            self.imap = np.concatenate([np.arange(m + 1), np.arange(m - 1, -1, -1)])


def _interval_probs(bounds: np.ndarray, mu, sigma) -> np.ndarray:
    """P(effect in each interval) under Normal(mu, sigma^2), batched.

    bounds: (N, K); mu, sigma broadcastable to (B, N); returns (B, N, K+1).
    """
    z = ndtr((bounds[None, :, :] - np.asarray(mu)[..., None]) / np.asarray(sigma)[..., None])
    B, N = z.shape[0], z.shape[1]
    out = np.empty((B, N, z.shape[2] + 1))
    out[:, :, 0] = z[:, :, 0]
    out[:, :, 1:-1] = np.diff(z, axis=2)
    out[:, :, -1] = 1.0 - z[:, :, -1]
    return out


def selection_normalizer(mu: float, tau: float, se: float, wf: WeightFunction) -> float:
    """Normalizing constant of the weighted (selection) density.

    Sums weight times the probability of the observed effect landing in
    each p-value interval under Normal(mu, tau^2 + se^2).
    """
    if se <= 0.0:
        raise ValueError("standard error must be positive")
    if tau < 0.0:
        raise ValueError("tau must be non-negative")
    geom = _SelectionGeometry(wf, np.array([se]))
    sigma = math.sqrt(tau * tau + se * se)
    probs = _interval_probs(geom.bounds, np.array([[mu]]), np.array([[sigma]]))
    omega = np.asarray(wf.weights)[geom.imap]
    return float(np.sum(probs[0, 0] * omega))


# ---------------------------------------------------------------------------
# Model components and priors


class BiasKind(enum.Enum):
    NONE = "none"
    SELECTION = "selection"
    PET = "pet"
    PEESE = "peese"


@dataclass(frozen=True)
class BiasComponent:
    """Publication-bias component of a model.

    ``coefficient`` pins a concrete regression slope for PET/PEESE when a
    fully specified component is needed (e.g. in simulation truth records);
    during fitting the slope is a free parameter.
    """

    kind: BiasKind
    weight_function: WeightFunction | None = None
    coefficient: float | None = None

    def __post_init__(self) -> None:
        if self.kind is BiasKind.SELECTION and self.weight_function is None:
            raise ValueError("selection component requires a weight function")
        if self.kind is not BiasKind.SELECTION and self.weight_function is not None:
            raise ValueError("only selection components carry a weight function")
        if self.coefficient is not None:
            if self.kind not in (BiasKind.PET, BiasKind.PEESE):
                raise ValueError("coefficient applies to PET/PEESE only")
            if self.coefficient < 0.0:
                raise ValueError("PET/PEESE coefficient must be non-negative")

    def describe(self) -> str:
        if self.kind is BiasKind.SELECTION:
            return self.weight_function.describe()
        return self.kind.value


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the component priors."""

    mu_mean: float = 0.0
    mu_sd: float = 1.0
    tau_shape: float = 1.0
    tau_scale: float = 0.15
    pet_scale: float = 1.0
    peese_scale: float = 5.0


@dataclass(frozen=True)
class ModelSpec:
    """One ensemble member: effect/heterogeneity/bias components."""

    effect: bool
    heterogeneity: bool
    bias: BiasComponent
    prior_prob: float
    priors: PriorConfig = field(default_factory=PriorConfig)
    label: str = ""

    def __post_init__(self) -> None:
        if not 0.0 < self.prior_prob < 1.0:
            raise ValueError("prior model probability must lie in (0, 1)")
        if not self.label:
            effect = "effect" if self.effect else "null"
            het = "het" if self.heterogeneity else "fixed"
            object.__setattr__(self, "label", f"{effect}|{het}|{self.bias.describe()}")

    def free_params(self) -> tuple[str, ...]:
        names: list[str] = []
        if self.effect:
            names.append("mu")
        if self.heterogeneity:
            names.append("tau")
        if self.bias.kind is BiasKind.SELECTION:
            names.extend(f"delta{i + 1}" for i in range(self.bias.weight_function.n_free))
        elif self.bias.kind is BiasKind.PET:
            names.append("pet")
        elif self.bias.kind is BiasKind.PEESE:
            names.append("peese")
        return tuple(names)

    @property
    def n_free(self) -> int:
        return len(self.free_params())


DEFAULT_WEIGHT_FUNCTIONS: tuple[WeightFunction, ...] = (
    WeightFunction("two", (0.05,)),
    WeightFunction("two", (0.05, 0.10)),
    WeightFunction("one", (0.05,)),
    WeightFunction("one", (0.025, 0.05)),
    WeightFunction("one", (0.05, 0.50)),
    WeightFunction("one", (0.025, 0.05, 0.50)),
)


@dataclass(frozen=True)
class SpaceConfig:
    """Model-space configuration: priors, factor probabilities, weight functions."""

    priors: PriorConfig = field(default_factory=PriorConfig)
    p_effect: float = 0.5
    p_heterogeneity: float = 0.5
    p_bias: float = 0.5
    selection_share: float = 0.5
    weight_functions: tuple[WeightFunction, ...] = DEFAULT_WEIGHT_FUNCTIONS

    def __post_init__(self) -> None:
        for name in ("p_effect", "p_heterogeneity", "p_bias", "selection_share"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.weight_functions:
            raise ValueError("at least one weight function is required")

    @classmethod
    def from_dict(cls, payload: dict) -> "SpaceConfig":
        payload = dict(payload)
        prior_keys = ("mu_mean", "mu_sd", "tau_shape", "tau_scale", "pet_scale", "peese_scale")
        priors = PriorConfig(**{k: float(payload.pop(k)) for k in list(payload) if k in prior_keys})
        wfs = payload.pop("weight_functions", None)
        kwargs = {k: float(v) for k, v in payload.items()}
        if wfs is not None:
            kwargs["weight_functions"] = tuple(
                WeightFunction(w["sides"], tuple(w["cutpoints"])) for w in wfs
            )
        return cls(priors=priors, **kwargs)


def default_model_space(config: SpaceConfig | None = None) -> list[ModelSpec]:
    """Cross effect x heterogeneity x bias components into the full space.

    With the default configuration this yields 2 x 2 x (1 + 6 + 2) = 36
    models whose prior probabilities give each binary factor a marginal
    probability of 1/2, split the bias-present mass equally between
    selection and regression adjustments, and split equally within each
    family.
    """
    cfg = config or SpaceConfig()
    n_wf = len(cfg.weight_functions)
    bias_states: list[tuple[BiasComponent, float]] = [(BiasComponent(BiasKind.NONE), 1.0 - cfg.p_bias)]
    for wf in cfg.weight_functions:
        bias_states.append(
            (BiasComponent(BiasKind.SELECTION, weight_function=wf), cfg.p_bias * cfg.selection_share / n_wf)
        )
    regression_mass = cfg.p_bias * (1.0 - cfg.selection_share) / 2.0
    bias_states.append((BiasComponent(BiasKind.PET), regression_mass))
    bias_states.append((BiasComponent(BiasKind.PEESE), regression_mass))

    space = []
    for effect in (False, True):
        p_e = cfg.p_effect if effect else 1.0 - cfg.p_effect
        for het in (False, True):
            p_h = cfg.p_heterogeneity if het else 1.0 - cfg.p_heterogeneity
            for bias, p_b in bias_states:
                space.append(
                    ModelSpec(
                        effect=effect,
                        heterogeneity=het,
                        bias=bias,
                        prior_prob=p_e * p_h * p_b,
                        priors=cfg.priors,
                    )
                )
    return space


# ---------------------------------------------------------------------------
# Densities


def omega_from_increments(deltas) -> np.ndarray:
    """Interval weights as reversed cumulative sums of simplex increments."""
    d = np.asarray(deltas, dtype=float)
    if d.ndim == 1:
        d = d[None, :]
    omega = np.cumsum(d[:, ::-1], axis=1)[:, ::-1]
    omega[:, 0] = 1.0  # guard against cumsum round-off
    return omega


def increments_from_omega(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    return np.concatenate([-np.diff(w), [w[-1]]])


class DataArrays:
    """Vectorized view of a dataset with cached selection geometry."""

    def __init__(self, ys, ses):
        self.y = np.asarray(ys, dtype=float)
        self.se = np.asarray(ses, dtype=float)
        if self.y.shape != self.se.shape or self.y.ndim != 1:
            raise ValueError("ys and ses must be equal-length vectors")
        if np.any(self.se <= 0.0):
            raise ValueError("all standard errors must be positive")
        self.se2 = self.se * self.se
        self.p_one = ndtr(-self.y / self.se)
        self._geometry: dict = {}
        self._counts: dict = {}

    @classmethod
    def from_estimates(cls, data) -> "DataArrays":
        return cls([e.y for e in data], [e.se for e in data])

    def flipped(self) -> "DataArrays":
        return DataArrays(-self.y, self.se)

    def geometry(self, wf: WeightFunction) -> _SelectionGeometry:
        key = (wf.sides, wf.cutpoints)
        if key not in self._geometry:
            self._geometry[key] = _SelectionGeometry(wf, self.se)
        return self._geometry[key]

    def interval_counts(self, wf: WeightFunction) -> np.ndarray:
        """Number of observed estimates in each p-value interval."""
        key = (wf.sides, wf.cutpoints)
        if key not in self._counts:
            idx = [_interval_index(wf, p) for p in self.p_one]
            counts = np.bincount(idx, minlength=len(wf.cutpoints) + 1)
            self._counts[key] = counts.astype(float)
        return self._counts[key]


def _normal_loglik_rows(ctx: DataArrays, mean_rows: np.ndarray, var_rows: np.ndarray) -> np.ndarray:
    resid = ctx.y[None, :] - mean_rows
    with np.errstate(over="ignore"):
        return -0.5 * np.sum(np.log(var_rows) + resid * resid / var_rows + LOG_2PI, axis=1)


def batch_log_likelihood(
    model: ModelSpec,
    ctx: DataArrays,
    mu: np.ndarray,
    tau: np.ndarray,
    omega: np.ndarray | None = None,
    coef: np.ndarray | None = None,
) -> np.ndarray:
    """Log-likelihood for a batch of parameter rows (natural space).

    mu/tau/coef: (B,); omega: (B, intervals). Fixed components must be
    passed as zeros. Rows assigning weight 0 to an observed estimate get
    -inf, which is a valid log-likelihood.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    B = max(mu.shape[0], tau.shape[0])
    mu, tau = np.broadcast_to(mu, (B,)), np.broadcast_to(tau, (B,))
    var_rows = tau[:, None] ** 2 + ctx.se2[None, :]
    kind = model.bias.kind

    if kind in (BiasKind.PET, BiasKind.PEESE):
        slope = np.broadcast_to(np.atleast_1d(np.asarray(coef, dtype=float)), (B,))
        predictor = ctx.se if kind is BiasKind.PET else ctx.se2
        mean_rows = mu[:, None] + slope[:, None] * predictor[None, :]
        return _normal_loglik_rows(ctx, mean_rows, var_rows)

    mean_rows = np.broadcast_to(mu[:, None], (B, ctx.y.shape[0]))
    base = _normal_loglik_rows(ctx, mean_rows, var_rows)
    if kind is BiasKind.NONE:
        return base

    wf = model.bias.weight_function
    geom = ctx.geometry(wf)
    omega = np.asarray(omega, dtype=float)
    if omega.ndim == 1:
        omega = np.broadcast_to(omega[None, :], (B, omega.shape[0]))
    counts = ctx.interval_counts(wf)
    occupied = counts > 0  # skip empty intervals so a zero weight there is harmless
    with np.errstate(divide="ignore"):
        weight_term = np.log(omega[:, occupied]) @ counts[occupied]

    probs = _interval_probs(geom.bounds, mean_rows, np.sqrt(var_rows))
    normalizer = np.einsum("bnk,bk->bn", probs, omega[:, geom.imap])
    # The normalizer can underflow to 0 where every positively-weighted
    # interval sits dozens of sigmas from the mean. The true density there is
    # vanishingly small, so flooring only underestimates it and never
    # produces a spurious +inf from the subtraction below.
    normalizer = np.maximum(normalizer, np.finfo(float).tiny)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_norm = np.sum(np.log(normalizer), axis=1)
        out = base + weight_term - log_norm
    # a zero weight on an observed estimate gives -inf, never NaN
    return np.where(np.isnan(out), -np.inf, out)


def batch_log_prior(
    model: ModelSpec,
    mu: np.ndarray | None = None,
    tau: np.ndarray | None = None,
    omega: np.ndarray | None = None,
    coef: np.ndarray | None = None,
) -> np.ndarray:
    """Joint log prior density over the model's free parameters, batched."""
    pr = model.priors
    terms = []
    if model.effect:
        m = np.asarray(mu, dtype=float)
        terms.append(-0.5 * (((m - pr.mu_mean) / pr.mu_sd) ** 2 + LOG_2PI) - math.log(pr.mu_sd))
    if model.heterogeneity:
        t = np.asarray(tau, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = (
                pr.tau_shape * math.log(pr.tau_scale)
                - lgamma(pr.tau_shape)
                - (pr.tau_shape + 1.0) * np.log(t)
                - pr.tau_scale / t
            )
        terms.append(np.where(t > 0.0, lp, -np.inf))
    kind = model.bias.kind
    if kind is BiasKind.SELECTION:
        w = np.asarray(omega, dtype=float)
        if w.ndim == 1:
            w = w[None, :]
        m_free = model.bias.weight_function.n_free
        deltas = np.concatenate([-np.diff(w, axis=1), w[:, -1:]], axis=1)
        valid = (
            np.all(deltas >= 0.0, axis=1)
            & np.all(w > 0.0, axis=1)
            & np.isclose(w[:, 0], 1.0, rtol=0.0, atol=1e-12)
        )
        terms.append(np.where(valid, lgamma(m_free + 1.0), -np.inf))
    elif kind in (BiasKind.PET, BiasKind.PEESE):
        scale = pr.pet_scale if kind is BiasKind.PET else pr.peese_scale
        b = np.asarray(coef, dtype=float)
        lp = math.log(2.0 / (math.pi * scale)) - np.log1p((b / scale) ** 2)
        terms.append(np.where(b >= 0.0, lp, -np.inf))
    if not terms:
        return np.zeros(1)
    out = terms[0].copy() if hasattr(terms[0], "copy") else np.asarray(terms[0])
    for extra in terms[1:]:
        out = out + extra
    return np.atleast_1d(out)


def _params_to_cols(model: ModelSpec, params: dict) -> dict:
    cols = {
        "mu": np.array([float(params.get("mu", 0.0))]),
        "tau": np.array([float(params.get("tau", 0.0))]),
        "omega": None,
        "coef": None,
    }
    if model.bias.kind is BiasKind.SELECTION:
        cols["omega"] = np.asarray(params["omega"], dtype=float)[None, :]
    elif model.bias.kind is BiasKind.PET:
        cols["coef"] = np.array([float(params["pet"])])
    elif model.bias.kind is BiasKind.PEESE:
        cols["coef"] = np.array([float(params["peese"])])
    return cols


def log_likelihood(model: ModelSpec, params: dict, data) -> float:
    """Log-likelihood of one parameter setting for a list of estimates.

    ``params`` maps component names ('mu', 'tau', 'omega', 'pet', 'peese')
    to values; components absent from the model are fixed at their null
    values. Estimates are expected on the common analysis scale.
    """
    ctx = data if isinstance(data, DataArrays) else DataArrays.from_estimates(data)
    cols = _params_to_cols(model, params)
    return float(
        batch_log_likelihood(model, ctx, cols["mu"], cols["tau"], omega=cols["omega"], coef=cols["coef"])[0]
    )


def log_prior_density(model: ModelSpec, params: dict) -> float:
    """Joint log prior density of the model's free parameters."""
    cols = _params_to_cols(model, params)
    return float(batch_log_prior(model, mu=cols["mu"], tau=cols["tau"], omega=cols["omega"], coef=cols["coef"])[0])
