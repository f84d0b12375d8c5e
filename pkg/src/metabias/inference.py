"""Marginal likelihoods, posterior model probabilities, and averaged summaries.

Integration strategy is chosen by the number of free parameters:

* 0 -- the log marginal is the log-likelihood at the fixed parameters;
* 1-2 -- Gauss-Hermite tensor quadrature adapted to the Laplace mode after
  transforming every parameter to an unconstrained scale;
* 3+ -- importance sampling from a multivariate Student-t proposal anchored
  at the Laplace mode, with a reported Monte Carlo standard error.

All model weights are carried in natural-log space so that extreme Bayes
factors never overflow. Given identical settings (including the seed) a fit
is bit-for-bit reproducible regardless of scheduling, because each model's
sampler is keyed by (seed, model label, data digest) alone.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.optimize import brentq, minimize
from scipy.special import log_ndtr, logsumexp, ndtr

from metabias import remeta
from metabias.effectsize import Metric, convert_point
from metabias.ensemble import (
    LOG_2PI,
    BiasKind,
    DataArrays,
    ModelSpec,
    batch_log_likelihood,
    default_model_space,
    omega_from_increments,
)

_T_PROPOSAL_DF = 7.0
_T_PROPOSAL_SCALE = 1.3


class FitError(RuntimeError):
    """No model in the ensemble could be evaluated."""


class ModelFailure(RuntimeError):
    """A single model's integrand could not be evaluated at its mode."""


class Partition(enum.Enum):
    EFFECT = "effect"
    PSB = "psb"
    SELECTION_GIVEN_PSB = "selection_given_psb"


@dataclass(frozen=True)
class IntegrationSettings:
    """Controls for the per-model integrators."""

    quadrature_nodes: int = 64
    is_samples: int = 20000
    seed: int = 0
    rel_tol: float = 1e-6
    mu_grid_points: int = 2048
    mu_grid_span: float = 6.0
    density_nodes: int = 32

    def __post_init__(self) -> None:
        if self.quadrature_nodes < 8:
            raise ValueError("quadrature_nodes must be at least 8")
        if self.is_samples < 1000:
            raise ValueError("is_samples must be at least 1000")


@lru_cache(maxsize=16)
def _gh_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite.hermgauss(n)
    return x, np.log(w)


def _data_digest(ctx: DataArrays) -> str:
    h = hashlib.sha256(ctx.y.tobytes() + ctx.se.tobytes())
    return h.hexdigest()[:16]


def _rng_for(seed: int, label: str, digest: str) -> np.random.Generator:
    material = f"{seed}|{label}|{digest}".encode()
    key = np.frombuffer(hashlib.sha256(material).digest()[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Reparameterization to standard-normal prior space
#
# Every free parameter is mapped through its prior's inverse CDF composed
# with the normal CDF, so the prior density times the Jacobian collapses to
# a standard normal factor. The resulting integrands have Gaussian tails in
# every direction, which adapted Gauss-Hermite rules resolve rapidly (a
# plain log transform leaves the half-Cauchy and simplex directions with
# exponential tails that converge far too slowly).

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# Far beyond any plausible parameter; likelihoods there are effectively zero,
# and capping keeps intermediate arithmetic finite.
_PARAM_CAP = 1e10


def _tau_from_v(v: np.ndarray, shape: float, scale: float) -> np.ndarray:
    if shape == 1.0:
        # Inverse-gamma(1, scale) has CDF exp(-scale/tau); log_ndtr hits -0.0
        # far in the right tail, where the cap takes over.
        with np.errstate(divide="ignore"):
            return np.minimum(-scale / log_ndtr(v), _PARAM_CAP)
    from scipy.stats import invgamma

    p = np.clip(ndtr(v), 1e-300, 1.0 - 1e-16)
    return np.minimum(invgamma.ppf(p, shape, scale=scale), _PARAM_CAP)


def _coef_from_v(v: np.ndarray, scale: float) -> np.ndarray:
    # Half-Cauchy(scale) has CDF (2/pi) atan(b/scale); split by sign of v
    # so both tails stay accurate.
    with np.errstate(divide="ignore", over="ignore"):
        low = scale * np.tan(0.5 * math.pi * ndtr(v))
        high = scale / np.tan(0.5 * math.pi * ndtr(-v))
    return np.minimum(np.where(v <= 0.0, low, high), _PARAM_CAP)


def _increments_from_v(V: np.ndarray) -> np.ndarray:
    """Unit-Dirichlet increments via stick-breaking with Beta(1, k) sticks."""
    B, m = V.shape
    deltas = np.empty((B, m + 1))
    rem = np.ones(B)
    for i in range(m):
        k = m - i  # Beta(1, m + 1 - (i + 1) + ...): remaining components - 1
        z = -np.expm1(log_ndtr(-V[:, i]) / k) if k > 1 else ndtr(V[:, i])
        deltas[:, i] = z * rem
        rem = rem * (1.0 - z)
    deltas[:, m] = rem
    return deltas


def _mu_quadratic_pieces(model: ModelSpec, ctx: DataArrays, tau, coef):
    """Coefficients of the joint log density as a quadratic in the mean effect.

    For every non-selection model the observation density is Gaussian with a
    mean linear in mu, so conditional on the remaining parameters the joint
    is -1/2 * p_post * (mu - m_post)^2 + const; the mean can therefore be
    integrated in closed form. Returns (p_post, m_post, const) per row.
    """
    pr = model.priors
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    var_rows = tau[:, None] ** 2 + ctx.se2[None, :]
    kind = model.bias.kind
    if kind is BiasKind.PET:
        resid = ctx.y[None, :] - np.atleast_1d(coef)[:, None] * ctx.se[None, :]
    elif kind is BiasKind.PEESE:
        resid = ctx.y[None, :] - np.atleast_1d(coef)[:, None] * ctx.se2[None, :]
    else:
        resid = np.broadcast_to(ctx.y[None, :], var_rows.shape)
    p_lik = np.sum(1.0 / var_rows, axis=1)
    m_lik = np.sum(resid / var_rows, axis=1) / p_lik
    c_lik = (
        -0.5 * np.sum(np.log(2.0 * math.pi * var_rows) + resid * resid / var_rows, axis=1)
        + 0.5 * p_lik * m_lik * m_lik
    )
    p0 = 1.0 / (pr.mu_sd * pr.mu_sd)
    c0 = -math.log(pr.mu_sd) - 0.5 * math.log(2.0 * math.pi)
    p_post = p_lik + p0
    m_post = (p_lik * m_lik + p0 * pr.mu_mean) / p_post
    const = (
        c_lik
        + c0
        - 0.5 * (p_lik * m_lik**2 + p0 * pr.mu_mean**2 - p_post * m_post**2)
    )
    return p_post, m_post, const


def _collapsed_loglik(model: ModelSpec, ctx: DataArrays, tau, coef):
    """Likelihood with the mean effect integrated out analytically."""
    p_post, m_post, const = _mu_quadratic_pieces(model, ctx, tau, coef)
    return const + 0.5 * (math.log(2.0 * math.pi) - np.log(p_post)), m_post


class _Transform:
    """Maps standard-normal-space rows V to natural parameter columns.

    For non-selection models with an effect component the mean is collapsed
    analytically (``include_mu=False``): it is absent from the integration
    space and the likelihood marginalizes it in closed form.
    """

    def __init__(self, model: ModelSpec, include_mu: bool = True):
        self.model = model
        self.collapsed = model.effect and not include_mu
        names = list(model.free_params())
        if self.collapsed:
            names.remove("mu")
        self.names = tuple(names)
        self.dim = len(self.names)
        self.mu_index = self.names.index("mu") if "mu" in self.names else None

    def to_natural(self, V: np.ndarray) -> dict:
        V = np.atleast_2d(np.asarray(V, dtype=float))
        B = V.shape[0]
        pr = self.model.priors
        cols = {"mu": np.zeros(B), "tau": np.zeros(B), "omega": None, "coef": None}
        i = 0
        if self.mu_index is not None:
            cols["mu"] = pr.mu_mean + pr.mu_sd * V[:, i]
            i += 1
        if self.model.heterogeneity:
            cols["tau"] = _tau_from_v(V[:, i], pr.tau_shape, pr.tau_scale)
            i += 1
        kind = self.model.bias.kind
        if kind is BiasKind.SELECTION:
            m = self.model.bias.weight_function.n_free
            cols["omega"] = omega_from_increments(_increments_from_v(V[:, i : i + m]))
            i += m
        elif kind in (BiasKind.PET, BiasKind.PEESE):
            scale = pr.pet_scale if kind is BiasKind.PET else pr.peese_scale
            cols["coef"] = _coef_from_v(V[:, i], scale)
            i += 1
        return cols

    def mu_to_v(self, mu: np.ndarray) -> np.ndarray:
        pr = self.model.priors
        return (np.asarray(mu, dtype=float) - pr.mu_mean) / pr.mu_sd

    def start(self, ctx: DataArrays) -> np.ndarray:
        v0 = np.zeros(self.dim)
        if self.mu_index is not None:
            w = 1.0 / ctx.se2
            pooled = float(np.sum(w * ctx.y) / np.sum(w))
            v0[self.mu_index] = float(np.clip(self.mu_to_v(pooled), -3.0, 3.0))
        return v0


def _log_post_v(model: ModelSpec, ctx: DataArrays, tr: _Transform, V: np.ndarray) -> np.ndarray:
    V = np.atleast_2d(np.asarray(V, dtype=float))
    cols = tr.to_natural(V)
    if tr.collapsed:
        ll, cond_mean = _collapsed_loglik(model, ctx, cols["tau"], cols["coef"])
        cols["mu"] = cond_mean  # conditional posterior mean, kept for summaries
    else:
        ll = batch_log_likelihood(model, ctx, cols["mu"], cols["tau"], omega=cols["omega"], coef=cols["coef"])
    prior = -0.5 * np.sum(V * V, axis=1) - tr.dim * _LOG_SQRT_2PI
    out = ll + prior
    return np.where(np.isnan(out), -np.inf, out)


def _find_mode(model: ModelSpec, ctx: DataArrays, tr: _Transform) -> tuple[np.ndarray, np.ndarray]:
    """Laplace anchor: mode of the transformed posterior and its precision."""
    d = tr.dim
    big = 1e15  # finite wall so the line search backs out of zero-density regions

    def f(u: np.ndarray) -> float:
        value = -float(_log_post_v(model, ctx, tr, u[None, :])[0])
        return min(value, big)

    def grad(u: np.ndarray) -> np.ndarray:
        h = 1e-5 * (1.0 + np.abs(u))
        pts = np.concatenate([u[None, :] + np.diag(h), u[None, :] - np.diag(h)])
        vals = np.minimum(-_log_post_v(model, ctx, tr, pts), big)
        return (vals[:d] - vals[d:]) / (2.0 * h)

    u0 = tr.start(ctx)
    if not np.isfinite(float(_log_post_v(model, ctx, tr, u0[None, :])[0])):
        raise ModelFailure(f"{model.label}: non-finite posterior at the starting point")
    res = minimize(f, u0, jac=grad, method="L-BFGS-B", options={"maxiter": 300})
    mode = res.x
    if not np.isfinite(res.fun) or res.fun >= big:
        raise ModelFailure(f"{model.label}: non-finite posterior at the Laplace mode")

    h = 1e-3 * (1.0 + np.abs(mode))
    pts = [mode]
    for j in range(d):
        for sj in (1.0, -1.0):
            p = mode.copy()
            p[j] += sj * h[j]
            pts.append(p)
    for j in range(d):
        for k in range(j + 1, d):
            for sj, sk in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                p = mode.copy()
                p[j] += sj * h[j]
                p[k] += sk * h[k]
                pts.append(p)
    vals = -_log_post_v(model, ctx, tr, np.asarray(pts))
    if not np.isfinite(vals[0]):
        raise ModelFailure(f"{model.label}: non-finite posterior at the Laplace mode")
    H = np.empty((d, d))
    f0 = vals[0]
    for j in range(d):
        fp, fm = vals[1 + 2 * j], vals[2 + 2 * j]
        H[j, j] = (fp - 2.0 * f0 + fm) / h[j] ** 2
    idx = 1 + 2 * d
    for j in range(d):
        for k in range(j + 1, d):
            fpp, fpm, fmp, fmm = vals[idx : idx + 4]
            H[j, k] = H[k, j] = (fpp - fpm - fmp + fmm) / (4.0 * h[j] * h[k])
            idx += 4
    if not np.all(np.isfinite(H)):
        raise ModelFailure(f"{model.label}: non-finite curvature at the Laplace mode")
    eigval, eigvec = np.linalg.eigh(H)
    floor = max(1e-8, 1e-8 * float(np.max(np.abs(eigval))))
    eigval = np.clip(eigval, floor, None)
    precision = eigvec @ np.diag(eigval) @ eigvec.T
    return mode, precision


# ---------------------------------------------------------------------------
# Integrators


@dataclass
class _Artifacts:
    """Posterior evidence for one model plus reusable integration state."""

    log_marginal: float
    mc_error: float
    mode: np.ndarray | None
    cov: np.ndarray | None
    # Weighted support of the posterior in natural space (nodes or draws).
    mu: np.ndarray | None
    tau: np.ndarray | None
    omega: np.ndarray | None
    coef: np.ndarray | None
    norm_weights: np.ndarray | None
    from_sampler: bool


def _exact_marginal(model: ModelSpec, ctx: DataArrays) -> _Artifacts:
    if model.effect:
        # effect-only model: conjugate normal evidence in closed form
        logm_arr, cond_mean = _collapsed_loglik(model, ctx, np.zeros(1), np.zeros(1))
        logm = float(logm_arr[0])
        if not np.isfinite(logm):
            raise ModelFailure(f"{model.label}: non-finite marginal at fixed parameters")
        return _Artifacts(logm, 0.0, np.zeros(0), np.zeros((0, 0)), cond_mean,
                          np.zeros(1), None, None, np.ones(1), False)
    ll = float(batch_log_likelihood(model, ctx, np.zeros(1), np.zeros(1))[0])
    if not np.isfinite(ll):
        raise ModelFailure(f"{model.label}: non-finite likelihood at fixed parameters")
    return _Artifacts(ll, 0.0, None, None, None, None, None, None, None, False)


_ADAPT_PASSES = 3


def _gh_tensor(nodes: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    x, logw = _gh_nodes(nodes)
    if d == 1:
        return x[:, None], logw + x * x
    grids = np.meshgrid(*([x] * d), indexing="ij")
    X = np.stack([g.ravel() for g in grids], axis=1)
    logw_grids = np.meshgrid(*([logw] * d), indexing="ij")
    return X, sum(g.ravel() for g in logw_grids) + np.sum(X * X, axis=1)


_ADAPT_RANGE_SDS = 12.0


def _composite_gl_1d(lo: float, hi: float, panels: int) -> tuple[np.ndarray, np.ndarray]:
    """Points and log-weights of a composite 10-point Gauss-Legendre rule."""
    x, w = np.polynomial.legendre.leggauss(10)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    pts = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    logw = (np.log(half[:, None] * w[None, :])).ravel()
    return pts, logw


def _quadrature_marginal(model: ModelSpec, ctx: DataArrays, tr: _Transform, nodes: int) -> _Artifacts:
    """Deterministic quadrature re-adapted to the posterior's own moments.

    The Laplace curvature only sees the peak, so a Gauss-Hermite pre-pass
    first matches the grid to the realized mean and spread. One dimension
    then uses a composite Gauss-Legendre rule over +-12 posterior sds
    (machine-accurate for smooth, skewed integrands); two dimensions use a
    moment-adapted Gauss-Hermite tensor grid.
    """
    mode, precision = _find_mode(model, ctx, tr)
    cov = np.linalg.inv(precision)
    d = tr.dim
    center, L = mode, np.linalg.cholesky(cov)

    # Moment-adaptation passes on a Gauss-Hermite grid. hermgauss weights
    # underflow past ~360 nodes, so tensor sizes stay below that.
    n_gh = 96 if d == 1 else min(int(2.5 * nodes), 320)
    X, logw_nd = _gh_tensor(n_gh, d)
    log_marginal = -math.inf
    for _ in range(_ADAPT_PASSES):
        U = center[None, :] + math.sqrt(2.0) * (X @ L.T)
        logpost = _log_post_v(model, ctx, tr, U)
        log_masses = logw_nd + logpost
        log_marginal = float(logsumexp(log_masses)) + 0.5 * d * math.log(2.0) + float(
            np.sum(np.log(np.diag(L)))
        )
        if not np.isfinite(log_marginal):
            raise ModelFailure(f"{model.label}: quadrature produced a non-finite log marginal")
        wts = np.exp(log_masses - np.max(log_masses))
        wts /= np.sum(wts)
        mean = wts @ U
        centered = U - mean
        second = centered.T @ (centered * wts[:, None]) + 1e-12 * np.eye(d)
        center = mean
        L = np.linalg.cholesky(1.44 * second)  # 1.2x posterior sd

    if d == 1:
        sd = math.sqrt(second[0, 0])
        pts, logw = _composite_gl_1d(
            center[0] - _ADAPT_RANGE_SDS * sd, center[0] + _ADAPT_RANGE_SDS * sd, max(nodes, 8)
        )
        U = pts[:, None]
        logpost = _log_post_v(model, ctx, tr, U)
        log_masses = logw + logpost
        log_marginal = float(logsumexp(log_masses))
        if not np.isfinite(log_marginal):
            raise ModelFailure(f"{model.label}: quadrature produced a non-finite log marginal")
        wts = np.exp(log_masses - np.max(log_masses))
        wts /= np.sum(wts)
        mean = wts @ U
        second = np.array([[float(wts @ (U[:, 0] - mean[0]) ** 2)]]) + 1e-12
        center = mean

    cols = tr.to_natural(U)
    if tr.collapsed:
        _, cols["mu"] = _collapsed_loglik(model, ctx, cols["tau"], cols["coef"])
    return _Artifacts(
        log_marginal, 0.0, center, second, cols["mu"], cols["tau"], cols["omega"], cols["coef"], wts, False
    )


def _importance_marginal(
    model: ModelSpec, ctx: DataArrays, tr: _Transform, settings: IntegrationSettings, digest: str
) -> _Artifacts:
    mode, precision = _find_mode(model, ctx, tr)
    cov = np.linalg.inv(precision)
    L = np.linalg.cholesky(cov) * _T_PROPOSAL_SCALE
    d, S, df = tr.dim, settings.is_samples, _T_PROPOSAL_DF
    rng = _rng_for(settings.seed, model.label, digest)
    z = rng.standard_normal((S, d))
    g = rng.chisquare(df, S)
    X = z * np.sqrt(df / g)[:, None]
    U = mode[None, :] + X @ L.T
    m2 = np.sum(X * X, axis=1)
    logq = (
        math.lgamma((df + d) / 2.0)
        - math.lgamma(df / 2.0)
        - 0.5 * d * math.log(df * math.pi)
        - float(np.sum(np.log(np.diag(L))))
        - 0.5 * (df + d) * np.log1p(m2 / df)
    )
    logpost = _log_post_v(model, ctx, tr, U)
    logw = logpost - logq
    log_marginal = float(logsumexp(logw)) - math.log(S)
    if not np.isfinite(log_marginal):
        raise ModelFailure(f"{model.label}: importance sampling produced a non-finite log marginal")
    v = np.exp(logw - np.max(logw))
    vbar = float(np.mean(v))
    mc_error = float(np.std(v, ddof=1) / (math.sqrt(S) * vbar))
    wts = v / np.sum(v)
    cols = tr.to_natural(U)
    return _Artifacts(
        log_marginal, mc_error, mode, cov, cols["mu"], cols["tau"], cols["omega"], cols["coef"], wts, True
    )


def _marginal_with_artifacts(
    model: ModelSpec, ctx: DataArrays, settings: IntegrationSettings, digest: str
) -> _Artifacts:
    # Non-selection models integrate the mean effect analytically, which
    # removes the likelihood ridge from the numeric integration space.
    collapsible = model.effect and model.bias.kind is not BiasKind.SELECTION
    tr = _Transform(model, include_mu=not collapsible)
    if tr.dim == 0:
        return _exact_marginal(model, ctx)
    if tr.dim <= 2:
        return _quadrature_marginal(model, ctx, tr, settings.quadrature_nodes)
    return _importance_marginal(model, ctx, tr, settings, digest)


def log_marginal_likelihood(model: ModelSpec, data, settings: IntegrationSettings) -> tuple[float, float]:
    """Log marginal likelihood of one model with an error estimate.

    The error estimate is a Monte Carlo standard error for sampled models
    and 0 for the deterministic (exact / quadrature) paths.
    """
    ctx = data if isinstance(data, DataArrays) else DataArrays.from_estimates(data)
    if ctx.y.shape[0] < 3:
        raise ValueError("at least three estimates are required")
    art = _marginal_with_artifacts(model, ctx, settings, _data_digest(ctx))
    return art.log_marginal, art.mc_error


# ---------------------------------------------------------------------------
# Marginal posterior of the mean effect


class _MuDensity:
    """Smooth marginal density of the mean effect on a fixed grid.

    The nuisance parameters are integrated with adapted Gauss-Hermite nodes;
    for non-selection models the joint density is quadratic in the mean, so
    each node contributes an exact Gaussian component.
    """

    def __init__(self, grid: np.ndarray, log_density, mean: float | None):
        self.grid = grid
        self.logpdf = log_density  # callable on arbitrary points, unnormalized
        log_on_grid = log_density(grid)
        peak = float(np.max(log_on_grid))
        raw = np.exp(log_on_grid - peak)
        total = float(simpson(raw, x=grid))
        self.pdf_grid = raw / total
        self.cdf_grid = np.clip(cumulative_simpson(self.pdf_grid, x=grid, initial=0.0), 0.0, None)
        self.cdf_grid /= self.cdf_grid[-1]
        self._log_scale = peak + math.log(total)
        self.mean = mean if mean is not None else float(simpson(self.pdf_grid * grid, x=grid))

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.logpdf(np.asarray(x, dtype=float)) - self._log_scale)


class _MuSample:
    """Weighted draws of the mean effect from an importance sampler."""

    def __init__(self, draws: np.ndarray, weights: np.ndarray):
        order = np.argsort(draws)
        self.draws = draws[order]
        self.cum = np.cumsum(weights[order])
        self.cum /= self.cum[-1]
        self.mean = float(np.sum(draws * weights) / np.sum(weights))

    def cdf(self, x: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.draws, x, side="right")
        return np.where(idx == 0, 0.0, self.cum[np.clip(idx - 1, 0, len(self.cum) - 1)])


class _MuAtom:
    """Point mass (the null models' contribution when averaging over them)."""

    def __init__(self, location: float = 0.0):
        self.location = location
        self.mean = location

    def cdf(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) >= self.location).astype(float)


def _conditional_gaussian_density(
    model: ModelSpec,
    ctx: DataArrays,
    art: _Artifacts,
    grid: np.ndarray,
    settings: IntegrationSettings,
) -> _MuDensity:
    """Mean-effect marginal for models whose joint log-density is quadratic in it.

    Each nuisance quadrature node contributes an exact Gaussian component,
    so the density (and hence the conjugate closed forms) is exact up to the
    nuisance integration.
    """
    tr = _Transform(model, include_mu=False)
    d = tr.dim
    if d > 0:
        X, logw_nd = _gh_tensor(settings.density_nodes, d)
        L = np.linalg.cholesky(art.cov + 1e-12 * np.eye(d))
        V = art.mode[None, :] + math.sqrt(2.0) * (X @ L.T)
        cols = tr.to_natural(V)
        # GH factor for the nuisance integral plus its standard-normal prior
        node_const = (
            logw_nd
            + 0.5 * d * math.log(2.0)
            + float(np.sum(np.log(np.diag(L))))
            - 0.5 * np.sum(V * V, axis=1)
            - d * _LOG_SQRT_2PI
        )
        tau_nodes, coef_nodes = cols["tau"], cols["coef"]
    else:
        tau_nodes = np.zeros(1)
        coef_nodes = np.zeros(1)
        node_const = np.zeros(1)

    p_post, m_post, const = _mu_quadratic_pieces(model, ctx, tau_nodes, coef_nodes)
    const = const + node_const

    def log_density(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_1d(points)
        comp = const[None, :] - 0.5 * p_post[None, :] * (pts[:, None] - m_post[None, :]) ** 2
        return logsumexp(comp, axis=1)

    node_mass = np.exp(const - np.max(const)) / np.sqrt(p_post)
    node_mass /= np.sum(node_mass)
    mean = float(np.sum(node_mass * m_post))
    return _MuDensity(grid, log_density, mean)


def _selection_grid_density(
    model: ModelSpec,
    ctx: DataArrays,
    art: _Artifacts,
    grid: np.ndarray,
    settings: IntegrationSettings,
) -> _MuDensity:
    """Mean-effect marginal for quadrature-path selection models.

    These models have no heterogeneity (they would be on the sampling path
    otherwise), so the interval probabilities depend on the mean alone and
    are shared across the weight-parameter nodes.
    """
    from metabias.ensemble import _interval_probs

    tr = _Transform(model)
    mu_idx = tr.mu_index
    nui_idx = [j for j in range(tr.dim) if j != mu_idx]
    wf = model.bias.weight_function
    geom = ctx.geometry(wf)
    counts = ctx.interval_counts(wf)
    occupied = counts > 0

    if nui_idx:
        x, logw = _gh_nodes(settings.density_nodes)
        sigma = math.sqrt(art.cov[nui_idx[0], nui_idx[0]])
        v_n = art.mode[nui_idx[0]] + math.sqrt(2.0) * sigma * x
        node_logw = logw + x * x + 0.5 * math.log(2.0) + math.log(sigma) - 0.5 * v_n * v_n
        V = np.tile(art.mode[None, :], (len(v_n), 1))
        V[:, nui_idx[0]] = v_n
        omega = tr.to_natural(V)["omega"]
    else:
        node_logw = np.zeros(1)
        omega = np.ones((1, len(wf.weights)))

    with np.errstate(divide="ignore"):
        weight_term = np.log(omega[:, occupied]) @ counts[occupied]  # (K,)
    omega_by_interval = omega[:, geom.imap]  # (K, J)

    def log_density(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_1d(np.asarray(points, dtype=float))
        resid = ctx.y[None, :] - pts[:, None]
        base = -0.5 * np.sum(
            np.log(ctx.se2[None, :]) + resid * resid / ctx.se2[None, :] + LOG_2PI, axis=1
        )
        vmu = tr.mu_to_v(pts)
        shape = (len(pts), len(ctx.y))
        probs = _interval_probs(
            geom.bounds, np.broadcast_to(pts[:, None], shape), np.broadcast_to(ctx.se[None, :], shape)
        )
        normalizer = np.einsum("gnj,kj->gnk", probs, omega_by_interval)
        normalizer = np.maximum(normalizer, np.finfo(float).tiny)  # see batch_log_likelihood
        with np.errstate(divide="ignore", invalid="ignore"):
            log_norm = np.sum(np.log(normalizer), axis=1)  # (G, K)
            comp = (
                base[:, None]
                + weight_term[None, :]
                - log_norm
                - 0.5 * (vmu * vmu)[:, None]
                + node_logw[None, :]
            )
        comp = np.where(np.isnan(comp), -np.inf, comp)
        return logsumexp(comp, axis=1)

    return _MuDensity(grid, log_density, mean=None)


def _mu_marginal(model, ctx, art, grid, settings):
    if not model.effect:
        return _MuAtom(0.0)
    if art.from_sampler:
        return _MuSample(art.mu, art.norm_weights)
    if model.bias.kind is BiasKind.SELECTION:
        return _selection_grid_density(model, ctx, art, grid, settings)
    return _conditional_gaussian_density(model, ctx, art, grid, settings)


class _MuMixture:
    """Posterior mixture of per-model mean-effect marginals."""

    def __init__(self, components: list, weights: np.ndarray, grid: np.ndarray):
        self.components = components
        self.weights = np.asarray(weights, dtype=float)
        self.weights /= np.sum(self.weights)
        self.grid = grid
        cdfs = []
        for comp in components:
            if isinstance(comp, _MuDensity):
                cdfs.append(comp.cdf_grid)
            else:
                cdfs.append(comp.cdf(grid))
        self.cdf_grid = np.sum(self.weights[:, None] * np.asarray(cdfs), axis=0)
        self.smooth = all(isinstance(c, _MuDensity) for c in components)

    def mean(self) -> float:
        return float(np.sum(self.weights * np.array([c.mean for c in self.components])))

    def _pdf(self, x: np.ndarray) -> np.ndarray:
        return np.sum(
            self.weights[:, None] * np.asarray([c.pdf(x) for c in self.components]), axis=0
        )

    def quantile(self, alpha: float) -> float:
        grid, cdf = self.grid, self.cdf_grid
        idx = int(np.searchsorted(cdf, alpha, side="left"))
        idx = min(max(idx, 1), len(grid) - 1)
        lo, hi = grid[idx - 1], grid[idx]
        if not self.smooth:
            c_lo, c_hi = cdf[idx - 1], cdf[idx]
            if c_hi <= c_lo:
                return float(lo)
            return float(lo + (alpha - c_lo) / (c_hi - c_lo) * (hi - lo))

        # Smooth path: refine inside the bracketing cell with exact density
        # evaluations so conjugate cases reproduce closed forms.
        base = cdf[idx - 1]
        gl_x, gl_w = np.polynomial.legendre.leggauss(32)

        def local_cdf(q: float) -> float:
            half = 0.5 * (q - lo)
            pts = lo + half * (gl_x + 1.0)
            return base + half * float(np.sum(gl_w * self._pdf(pts)))

        f_lo, f_hi = base - alpha, local_cdf(hi) - alpha
        if f_lo >= 0.0:
            return float(lo)
        if f_hi <= 0.0:
            return float(hi)
        return float(brentq(lambda q: local_cdf(q) - alpha, lo, hi, xtol=1e-13))


# ---------------------------------------------------------------------------
# Ensemble fit


@dataclass(frozen=True)
class ModelFit:
    """Evidence and posterior summaries for one ensemble member."""

    label: str
    effect: bool
    heterogeneity: bool
    bias_kind: str
    bias_desc: str
    n_free: int
    prior_prob: float
    log_marginal: float
    mc_error: float
    posterior_prob: float
    post_mu: float | None = None
    post_tau: float | None = None
    post_coef: float | None = None
    post_omega: tuple[float, ...] | None = None


@dataclass
class FitResult:
    """Ensemble fit: per-model evidence plus derived inference quantities."""

    models: list[ModelFit]
    log_bf_effect: float
    log_bf_psb: float
    log_bf_selection_given_psb: float
    post_effect: float
    post_psb: float
    mu_conditional: tuple[float, float, float] | None
    mu_averaged: tuple[float, float, float] | None
    flipped: bool
    failures: list[str]
    renormalized: bool
    settings: IntegrationSettings
    _mu_marginals: dict = field(default_factory=dict, repr=False)
    _space: list = field(default_factory=list, repr=False)

    @property
    def bf_effect(self) -> float:
        return math.exp(self.log_bf_effect) if self.log_bf_effect < 700 else math.inf

    @property
    def bf_psb(self) -> float:
        return math.exp(self.log_bf_psb) if self.log_bf_psb < 700 else math.inf

    def model_by_label(self, label: str) -> ModelFit:
        for m in self.models:
            if m.label == label:
                return m
        raise KeyError(label)

    def to_json_dict(self) -> dict:
        return {
            "models": [
                {
                    "id": m.label,
                    "components": {
                        "effect": m.effect,
                        "heterogeneity": m.heterogeneity,
                        "bias": m.bias_desc,
                    },
                    "log_marginal": m.log_marginal,
                    "mc_error": m.mc_error,
                    "prior_prob": m.prior_prob,
                    "posterior_prob": m.posterior_prob,
                }
                for m in self.models
            ],
            "log_bf_effect": self.log_bf_effect,
            "log_bf_psb": self.log_bf_psb,
            "log_bf_selection_given_psb": self.log_bf_selection_given_psb,
            "log10_bf_effect": self.log_bf_effect / math.log(10.0),
            "log10_bf_psb": self.log_bf_psb / math.log(10.0),
            "post_effect": self.post_effect,
            "post_psb": self.post_psb,
            "mu_conditional_d": list(self.mu_conditional) if self.mu_conditional else None,
            "mu_averaged_d": list(self.mu_averaged) if self.mu_averaged else None,
            "flipped": self.flipped,
            "diagnostics": {"failures": list(self.failures), "renormalized": self.renormalized},
        }


def _log_partition_bf(log_marginals, priors, in_mask) -> float:
    lw = [lm + math.log(p) for lm, p in zip(log_marginals, priors)]
    lw_in = [v for v, keep in zip(lw, in_mask) if keep]
    lw_out = [v for v, keep in zip(lw, in_mask) if not keep]
    prior_in = sum(p for p, keep in zip(priors, in_mask) if keep)
    prior_out = sum(p for p, keep in zip(priors, in_mask) if not keep)
    if not lw_in or prior_in == 0.0:
        return -math.inf
    if not lw_out or prior_out == 0.0:
        return math.inf
    return float(
        logsumexp(lw_in) - logsumexp(lw_out) - (math.log(prior_in) - math.log(prior_out))
    )


def _unflip_interval(triple, flipped: bool):
    mean, lo, hi = triple
    if flipped:
        mean, lo, hi = -mean, -hi, -lo
    return mean, lo, hi


def _to_cohens_d(triple):
    return tuple(convert_point(v, Metric.FISHER_Z, Metric.COHEN_D) for v in triple)


def fit_ensemble(
    data,
    space: list[ModelSpec] | None = None,
    settings: IntegrationSettings | None = None,
    *,
    orient: bool = True,
) -> FitResult:
    """Fit the full model ensemble to one meta-analysis.

    ``data`` holds estimates on the common analysis scale (Fisher z). When
    ``orient`` is set, the data are reflected so the pooled random-effects
    estimate is non-negative before one-sided components are fit, and the
    reported effect summaries are mapped back. Estimates whose models fail
    to integrate are dropped and the remaining prior probabilities are
    renormalized, with the event recorded in ``failures``.
    """
    settings = settings or IntegrationSettings()
    space = space if space is not None else default_model_space()
    ctx = data if isinstance(data, DataArrays) else DataArrays.from_estimates(data)
    if ctx.y.shape[0] < 3:
        raise ValueError("at least three estimates are required")

    flipped = False
    if orient:
        fit0 = remeta.reml_fit(list(zip(ctx.y, ctx.se)))
        if fit0.mu_hat < 0.0:
            flipped = True
            ctx = ctx.flipped()
    digest = _data_digest(ctx)

    records: list[tuple[ModelSpec, _Artifacts]] = []
    failures: list[str] = []
    for model in space:
        try:
            records.append((model, _marginal_with_artifacts(model, ctx, settings, digest)))
        except ModelFailure as exc:
            failures.append(str(exc))
    if not records:
        raise FitError("every model in the ensemble failed to integrate")

    log_weights = np.array([a.log_marginal + math.log(m.prior_prob) for m, a in records])
    log_total = float(logsumexp(log_weights))
    post = np.exp(log_weights - log_total)
    post /= post.sum()

    post_effect = float(np.sum(post[[m.effect for m, _ in records]]))
    post_psb = float(np.sum(post[[m.bias.kind is not BiasKind.NONE for m, _ in records]]))

    marginals_list = [a.log_marginal for _, a in records]
    priors_list = [m.prior_prob for m, _ in records]
    log_bf_effect = _log_partition_bf(marginals_list, priors_list, [m.effect for m, _ in records])
    log_bf_psb = _log_partition_bf(
        marginals_list, priors_list, [m.bias.kind is not BiasKind.NONE for m, _ in records]
    )
    bias_sel = [(a.log_marginal, m.prior_prob, m.bias.kind is BiasKind.SELECTION)
                for m, a in records if m.bias.kind is not BiasKind.NONE]
    if bias_sel:
        log_bf_sel = _log_partition_bf([b[0] for b in bias_sel], [b[1] for b in bias_sel], [b[2] for b in bias_sel])
    else:
        log_bf_sel = math.nan

    grid = np.linspace(
        -settings.mu_grid_span * space[0].priors.mu_sd,
        settings.mu_grid_span * space[0].priors.mu_sd,
        settings.mu_grid_points,
    )
    marginals: dict[str, object] = {}
    for (model, art), p in zip(records, post):
        if model.effect and p > 0.0:
            marginals[model.label] = _mu_marginal(model, ctx, art, grid, settings)

    mu_conditional = None
    effect_idx = [i for i, (m, _) in enumerate(records) if m.effect]
    effect_mass = float(np.sum(post[effect_idx]))
    if effect_idx and effect_mass > 0.0:
        comps = [marginals[records[i][0].label] for i in effect_idx]
        mix = _MuMixture(comps, post[effect_idx], grid)
        triple = (mix.mean(), mix.quantile(0.025), mix.quantile(0.975))
        mu_conditional = _to_cohens_d(_unflip_interval(triple, flipped))

    mu_averaged = None
    if effect_idx and effect_mass > 0.0:
        comps_all, wts_all = [], []
        for i, (model, _) in enumerate(records):
            comps_all.append(marginals.get(model.label, _MuAtom(0.0)))
            wts_all.append(post[i])
        mix_all = _MuMixture(comps_all, np.asarray(wts_all), grid)
        triple = (mix_all.mean(), mix_all.quantile(0.025), mix_all.quantile(0.975))
        mu_averaged = _to_cohens_d(_unflip_interval(triple, flipped))

    model_fits = []
    for (model, art), p in zip(records, post):
        wts = art.norm_weights
        post_mu = post_tau = post_coef = None
        post_omega = None
        if wts is not None:
            if model.effect:
                post_mu = float(np.sum(wts * art.mu))
            if model.heterogeneity:
                post_tau = float(np.sum(wts * art.tau))
            if art.coef is not None:
                post_coef = float(np.sum(wts * art.coef))
            if art.omega is not None:
                post_omega = tuple(float(v) for v in wts @ art.omega)
        model_fits.append(
            ModelFit(
                label=model.label,
                effect=model.effect,
                heterogeneity=model.heterogeneity,
                bias_kind=model.bias.kind.value,
                bias_desc=model.bias.describe(),
                n_free=model.n_free,
                prior_prob=model.prior_prob,
                log_marginal=art.log_marginal,
                mc_error=art.mc_error,
                posterior_prob=float(p),
                post_mu=post_mu,
                post_tau=post_tau,
                post_coef=post_coef,
                post_omega=post_omega,
            )
        )

    return FitResult(
        models=model_fits,
        log_bf_effect=log_bf_effect,
        log_bf_psb=log_bf_psb,
        log_bf_selection_given_psb=log_bf_sel,
        post_effect=post_effect,
        post_psb=post_psb,
        mu_conditional=mu_conditional,
        mu_averaged=mu_averaged,
        flipped=flipped,
        failures=failures,
        renormalized=bool(failures),
        settings=settings,
        _mu_marginals=marginals,
        _space=[m for m, _ in records],
    )


def unadjusted_fit(
    data,
    space: list[ModelSpec] | None = None,
    settings: IntegrationSettings | None = None,
    *,
    orient: bool = True,
) -> FitResult:
    """Fit the bias-unadjusted ensemble (the no-bias models, renormalized)."""
    space = space if space is not None else default_model_space()
    sub = [m for m in space if m.bias.kind is BiasKind.NONE]
    total = sum(m.prior_prob for m in sub)
    sub = [replace(m, prior_prob=m.prior_prob / total) for m in sub]
    return fit_ensemble(data, sub, settings, orient=orient)


def inclusion_bf(fit: FitResult, partition: Partition) -> float:
    """Inclusion Bayes factor for a component partition of the fitted space."""
    records = list(zip(fit._space, fit.models))
    if partition is Partition.SELECTION_GIVEN_PSB:
        records = [(m, f) for m, f in records if m.bias.kind is not BiasKind.NONE]
        if not records:
            raise ValueError("partition requires bias-component models with prior mass")
        mask = [m.bias.kind is BiasKind.SELECTION for m, _ in records]
    elif partition is Partition.EFFECT:
        mask = [m.effect for m, _ in records]
    else:
        mask = [m.bias.kind is not BiasKind.NONE for m, _ in records]
    log_bf = _log_partition_bf(
        [f.log_marginal for _, f in records], [m.prior_prob for m, _ in records], mask
    )
    return math.exp(log_bf) if log_bf < 700 else math.inf


def conditional_effect_estimate(fit: FitResult) -> tuple[float, float, float]:
    """Posterior mean and central 95% interval of the effect, given it exists."""
    if fit.mu_conditional is None:
        raise ValueError("no posterior mass on effect-present models")
    return fit.mu_conditional


def publication_probability_curve(fit: FitResult, p_grid) -> np.ndarray:
    """Posterior-mean relative publication probability across p-values.

    Selection models contribute their posterior-mean interval weights;
    every other model contributes weight 1. The curve is normalized so the
    most-significant region equals 1.
    """
    from metabias.ensemble import weight_at

    p_grid = np.asarray(p_grid, dtype=float)
    if np.any((p_grid <= 0.0) | (p_grid >= 1.0)):
        raise ValueError("p grid must lie in (0, 1)")
    curve = np.zeros_like(p_grid)
    for spec, mf in zip(fit._space, fit.models):
        if spec.bias.kind is BiasKind.SELECTION and mf.post_omega is not None:
            wf = spec.bias.weight_function.with_weights(
                (1.0,) + tuple(min(max(w, 1e-300), 1.0) for w in mf.post_omega[1:])
            )
            curve += mf.posterior_prob * np.array([weight_at(wf, p) for p in p_grid])
        else:
            curve += mf.posterior_prob
    # the most-significant interval has weight 1 in every component, so the
    # anchor is the total posterior mass
    return curve / sum(mf.posterior_prob for mf in fit.models)


def inflation_curve(fit: FitResult, se_grid) -> np.ndarray:
    """Posterior-mean effect inflation as a function of the standard error."""
    se_grid = np.asarray(se_grid, dtype=float)
    if np.any(se_grid <= 0.0):
        raise ValueError("standard errors must be positive")
    pet_total = sum(
        mf.posterior_prob * mf.post_coef
        for spec, mf in zip(fit._space, fit.models)
        if spec.bias.kind is BiasKind.PET and mf.post_coef is not None
    )
    peese_total = sum(
        mf.posterior_prob * mf.post_coef
        for spec, mf in zip(fit._space, fit.models)
        if spec.bias.kind is BiasKind.PEESE and mf.post_coef is not None
    )
    return pet_total * se_grid + peese_total * se_grid * se_grid


# ---------------------------------------------------------------------------
# Combined adjusted/unadjusted analysis


@dataclass
class AnalysisResult:
    """Adjusted and unadjusted fits plus the classical summary for one MA."""

    ma_id: str
    field: str
    n_estimates: int
    reml: remeta.RemlFit
    adjusted: FitResult
    unadjusted: FitResult
    y_bar_d: float

    def to_json_dict(self) -> dict:
        doc = self.adjusted.to_json_dict()
        doc.update(
            {
                "ma_id": self.ma_id,
                "field": self.field,
                "n_estimates": self.n_estimates,
                "post_effect_adj": self.adjusted.post_effect,
                "post_effect_unadj": self.unadjusted.post_effect,
                "log_bf_effect_unadj": self.unadjusted.log_bf_effect,
                "y_bar_d": self.y_bar_d,
                "reml": {
                    "tau2": self.reml.tau2,
                    "mu_hat": self.reml.mu_hat,
                    "se_mu": self.reml.se_mu,
                    "p_value": self.reml.p_value,
                    "significant": self.reml.significant,
                    "converged": self.reml.converged,
                },
            }
        )
        return doc


def analyze(ma, space: list[ModelSpec] | None = None, settings: IntegrationSettings | None = None) -> AnalysisResult:
    """Run the full per-meta-analysis pipeline on ingested (Fisher z) data."""
    space = space if space is not None else default_model_space()
    settings = settings or IntegrationSettings()
    pairs = [(e.y, e.se) for e in ma.estimates]
    reml = remeta.reml_fit(pairs)
    adjusted = fit_ensemble(ma.estimates, space, settings)
    unadj = unadjusted_fit(ma.estimates, space, settings)
    y_bar_d = float(
        np.mean([convert_point(e.y, Metric.FISHER_Z, Metric.COHEN_D) for e in ma.estimates])
    )
    return AnalysisResult(
        ma_id=ma.ma_id,
        field=ma.field,
        n_estimates=len(ma.estimates),
        reml=reml,
        adjusted=adjusted,
        unadjusted=unadj,
        y_bar_d=y_bar_d,
    )
