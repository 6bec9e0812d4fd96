"""Cochran-Q tests of a constant effect intensity across strata.

Under a linear effect every stratum ratio estimates the same slope, so
heterogeneity of ``theta_s`` around ``beta * alpha_s`` indicates curvature.
Two extensions allow an instrument with a direct additive effect
(``decomposition``) or an instrument-modified effect (``factorization``).

By default the denominators include the sampling covariance between the
stratum slopes, which are estimated on the same individuals. Passing
``correlated=False`` gives the simplified statistic that ignores it; that
version is conservative when confounding is strong.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .summaries import StratumSummary

__all__ = [
    "QTestResult",
    "q_linearity",
    "q_linearity_decomposition",
    "q_linearity_factorization",
    "q_test",
]


@dataclass(frozen=True)
class QTestResult:
    q: float
    df: int
    p_value: float
    estimates: dict
    variant: str

    def to_dict(self) -> dict:
        return asdict(self)


def _arrays(summaries: Sequence[StratumSummary], correlated: bool = True):
    th = np.array([s.theta_hat for s in summaries])
    se_t = np.array([s.se_theta for s in summaries])
    al = np.array([s.alpha_hat for s in summaries])
    se_a = np.array([s.se_alpha for s in summaries])
    c_ta = np.array([s.cov_theta_alpha for s in summaries]) if correlated else np.zeros(len(th))
    return th, se_t, al, se_a, c_ta


def _result(q: float, df: int, est: dict, variant: str) -> QTestResult:
    q = max(float(q), 0.0)
    return QTestResult(q, df, float(stats.chi2.sf(q, df)), est, variant)


def q_statistic(beta: float, th, se_t, al, se_a, c_ta=0.0) -> float:
    """``sum (theta - beta alpha)^2 / Var(theta - beta alpha)``."""
    var = se_t**2 + beta**2 * se_a**2 - 2 * beta * c_ta
    return float(np.sum((th - beta * al) ** 2 / var))


def q_linearity(summaries: Sequence[StratumSummary], correlated: bool = True) -> QTestResult:
    """Standard test: ``min_beta Q(beta)`` against chi-square with ``K - 1`` df."""
    K = len(summaries)
    if K < 2:
        raise ValueError("the linearity test needs at least 2 strata")
    th, se_t, al, se_a, c_ta = _arrays(summaries, correlated)
    if np.any(se_t <= 0):
        raise ValueError("se_theta must be positive")

    def Q(b):
        return q_statistic(b, th, se_t, al, se_a, c_ta)

    w = 1.0 / se_t**2
    b0 = float(np.sum(w * al * th) / np.sum(w * al * al))
    cands = [b0]
    span = 10.0 * (abs(b0) + np.max(np.abs(th / al)) + 1.0)
    for br in ((b0 - 1.0, b0 + 1.0), None):
        try:
            if br is None:
                res = optimize.minimize_scalar(Q, bounds=(-span, span), method="bounded",
                                               options={"xatol": 1e-12})
            else:
                res = optimize.minimize_scalar(Q, bracket=br, method="brent", tol=1e-12)
            cands.append(float(res.x))
        except (ValueError, RuntimeError):
            continue
    beta = min(cands, key=Q)
    return _result(Q(beta), K - 1, {"beta": beta}, "standard")


def _nelder_mead(f, x0, restarts: int = 5):
    best = np.asarray(x0, dtype=float)
    fbest = f(best)
    opts = {"xatol": 1e-10, "fatol": 1e-10, "maxiter": 20_000, "maxfev": 40_000}
    for i in range(restarts):
        step = 0.1 * (np.abs(best) + 0.1) * (1.0 + i)
        simplex = np.vstack([best] + [best + step[j] * np.eye(best.size)[j] for j in range(best.size)])
        res = optimize.minimize(f, best, method="Nelder-Mead",
                                options={**opts, "initial_simplex": simplex})
        if res.fun < fbest:
            gain = fbest - float(res.fun)
            best, fbest = np.asarray(res.x), float(res.fun)
            if gain > 1e-10:
                continue
        if i > 0:
            break  # a restart brought no further progress
    return best, fbest


def _wls(cols, target, weights):
    A = np.column_stack(cols) * np.sqrt(weights)[:, None]
    coef, *_ = np.linalg.lstsq(A, target * np.sqrt(weights), rcond=None)
    return coef


def q_linearity_decomposition(summaries: Sequence[StratumSummary],
                              correlated: bool = True) -> QTestResult:
    """Test allowing an additive instrument effect: ``theta_s = c0 + c1 alpha_s``; ``K - 2`` df."""
    K = len(summaries)
    if K < 3:
        raise ValueError("the decomposition test needs at least 3 strata")
    th, se_t, al, se_a, c_ta = _arrays(summaries, correlated)

    def Q(c):
        c0, c1 = c
        var = se_t**2 + c1**2 * se_a**2 - 2 * c1 * c_ta
        return float(np.sum((th - c0 - c1 * al) ** 2 / var))

    x0 = _wls([np.ones(K), al], th, 1.0 / se_t**2)
    c, q = _nelder_mead(Q, x0)
    return _result(q, K - 2, {"c0": float(c[0]), "c1": float(c[1])}, "decomposition")


def q_linearity_factorization(summaries: Sequence[StratumSummary],
                              correlated: bool = True) -> QTestResult:
    """Test for an instrument-modified effect; ``K - 3`` df.

    ``Q(c0, c1, beta) = sum (theta - c0 - c1 gamma - beta alpha)^2 /
    (se_theta^2 + c1^2 se_gamma^2 + beta^2 se_alpha^2)`` where ``gamma_s``
    is the stratum association of the instrument with ``Z * X``. The form
    is motivated by a binary instrument. With ``correlated`` the
    denominator also carries the slope covariances.
    """
    K = len(summaries)
    if K < 4:
        raise ValueError("the factorization test needs at least 4 strata")
    if any(s.gamma_hat is None or s.se_gamma is None for s in summaries):
        raise ValueError("summaries lack gamma_hat/se_gamma; compute them with with_gamma=True")
    th, se_t, al, se_a, c_ta = _arrays(summaries, correlated)
    ga = np.array([s.gamma_hat for s in summaries])
    se_g = np.array([s.se_gamma for s in summaries])
    if correlated:
        c_tg = np.array([s.cov_theta_gamma or 0.0 for s in summaries])
        c_ag = np.array([s.cov_alpha_gamma or 0.0 for s in summaries])
    else:
        c_tg = c_ag = np.zeros(K)

    def Q(v):
        c0, c1, b = v
        var = (se_t**2 + c1**2 * se_g**2 + b**2 * se_a**2
               - 2 * c1 * c_tg - 2 * b * c_ta + 2 * c1 * b * c_ag)
        return float(np.sum((th - c0 - c1 * ga - b * al) ** 2 / var))

    x0 = _wls([np.ones(K), ga, al], th, 1.0 / se_t**2)
    v, q = _nelder_mead(Q, x0)
    return _result(q, K - 3, {"c0": float(v[0]), "c1": float(v[1]), "beta": float(v[2])},
                   "factorization")


def q_test(summaries: Sequence[StratumSummary], variant: str = "standard",
           correlated: bool = True) -> QTestResult:
    fn = {
        "standard": q_linearity,
        "decomposition": q_linearity_decomposition,
        "factorization": q_linearity_factorization,
    }.get(variant)
    if fn is None:
        raise ValueError(f"unknown Q-test variant {variant!r}")
    return fn(summaries, correlated)
