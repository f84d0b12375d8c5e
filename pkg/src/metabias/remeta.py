"""Classical random-effects meta-analysis with REML heterogeneity estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

_LOG_EPS = 1e-12
_MAX_ITER = 200
_BRACKET_TOL = 1e-10


@dataclass(frozen=True)
class RemlFit:
    """Pooled random-effects fit with a two-sided Wald test."""

    tau2: float
    mu_hat: float
    se_mu: float
    p_value: float
    significant: bool
    converged: bool


def restricted_loglik(tau2: float, ys: np.ndarray, ses: np.ndarray) -> float:
    """Restricted log-likelihood at tau^2, up to an additive constant."""
    v = ses * ses + tau2
    w = 1.0 / v
    sw = float(np.sum(w))
    mu = float(np.sum(w * ys)) / sw
    q = float(np.sum(w * (ys - mu) ** 2))
    return -0.5 * (float(np.sum(np.log(v))) + math.log(sw) + q)


def _restricted_score_at_zero(ys: np.ndarray, ses: np.ndarray) -> float:
    w = 1.0 / (ses * ses)
    sw = float(np.sum(w))
    mu = float(np.sum(w * ys)) / sw
    return -0.5 * (float(np.sum(w)) - float(np.sum(w * w)) / sw - float(np.sum(w * w * (ys - mu) ** 2)))


def _as_arrays(estimates) -> tuple[np.ndarray, np.ndarray]:
    pairs = [(float(y), float(se)) for y, se in estimates]
    ys = np.array([p[0] for p in pairs])
    ses = np.array([p[1] for p in pairs])
    if np.any(ses <= 0.0):
        raise ValueError("all standard errors must be positive")
    return ys, ses


def reml_tau2(estimates) -> float:
    """REML estimate of the between-study variance tau^2."""
    tau2, _ = _reml_tau2_full(estimates)
    return tau2


def _reml_tau2_full(estimates) -> tuple[float, bool]:
    ys, ses = _as_arrays(estimates)
    if len(ys) < 2:
        raise ValueError("REML needs at least 2 estimates")
    if np.all(ses == ses[0]):
        # Equal standard errors admit the closed form tau^2 = s_y^2 - se^2.
        return max(float(np.var(ys, ddof=1)) - float(ses[0] ** 2), 0.0), True
    if _restricted_score_at_zero(ys, ses) <= 0.0:
        return 0.0, True

    # Golden-section search on u = log(tau^2 + eps).
    upper = max(10.0 * float(np.max(ses) ** 2), 10.0 * float(np.var(ys)), 1.0)
    lo, hi = math.log(_LOG_EPS), math.log(upper + _LOG_EPS)

    def f(u: float) -> float:
        return restricted_loglik(math.exp(u) - _LOG_EPS, ys, ses)

    phi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - phi * (hi - lo)
    x2 = lo + phi * (hi - lo)
    f1, f2 = f(x1), f(x2)
    converged = False
    for _ in range(_MAX_ITER):
        if hi - lo < _BRACKET_TOL:
            converged = True
            break
        if f1 >= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - phi * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + phi * (hi - lo)
            f2 = f(x2)
    tau2 = max(math.exp(0.5 * (lo + hi)) - _LOG_EPS, 0.0)
    # Boundary guard: the interior search never quite reaches tau^2 = 0.
    if restricted_loglik(0.0, ys, ses) >= restricted_loglik(tau2, ys, ses):
        tau2 = 0.0
    return tau2, converged


def pool(estimates, tau2: float) -> tuple[float, float]:
    """Inverse-variance pooled effect and its standard error at a given tau^2."""
    if tau2 < 0.0:
        raise ValueError("tau^2 must be non-negative")
    ys, ses = _as_arrays(estimates)
    if len(ys) == 0:
        raise ValueError("cannot pool an empty set of estimates")
    w = 1.0 / (ses * ses + tau2)
    sw = float(np.sum(w))
    return float(np.sum(w * ys)) / sw, 1.0 / math.sqrt(sw)


def wald_test(mu_hat: float, se_mu: float, alpha: float = 0.05) -> tuple[float, bool]:
    """Two-sided Wald z-test; significance uses a strict comparison."""
    if se_mu <= 0.0:
        raise ValueError("pooled standard error must be positive")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    p = 2.0 * float(ndtr(-abs(mu_hat / se_mu)))
    return p, p < alpha


def unweighted_mean(estimates) -> float:
    """Arithmetic mean of the effect values."""
    ys, _ = _as_arrays(estimates)
    if len(ys) == 0:
        raise ValueError("cannot average an empty set of estimates")
    return float(np.mean(ys))


def reml_fit(estimates, alpha: float = 0.05) -> RemlFit:
    """Full random-effects pipeline: REML tau^2, pooling, Wald test."""
    tau2, converged = _reml_tau2_full(estimates)
    mu_hat, se_mu = pool(estimates, tau2)
    p, significant = wald_test(mu_hat, se_mu, alpha)
    return RemlFit(tau2=tau2, mu_hat=mu_hat, se_mu=se_mu, p_value=p, significant=significant, converged=converged)
