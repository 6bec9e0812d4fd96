"""Change-point inference with a sum of single effects fitted by IBSS.

The effect intensity is modelled as ``h'(x) = b_0 + sum_p b_p I{x >= t_p}``,
so each stratum ratio is ``b_0 + sum_p b_p C_s(t_p)`` where ``C_s`` is the
stratum's weight upper integral. Column 0 (knot ``t_0`` at the exposure
minimum) is all ones and carries the global slope ``b_0``.

Everything runs on the design and response whitened by the known stratum
standard errors, so the residual variance is fixed at 1.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .curves import EffectCurve
from .data import Dataset
from .summaries import StratumSummary, WeightFunction, weight_integral_above

__all__ = [
    "ChangePointDesign",
    "SusieFit",
    "CredibleSet",
    "ConvergenceWarning",
    "default_knots",
    "build_changepoint_design",
    "single_effect_regression",
    "susie_ibss",
    "credible_set",
    "changepoint_location",
    "partial_contrast",
    "counterfactual_predict",
    "effect_posterior_mean",
    "effect_credible_interval",
    "effect_credible_band",
]

LOG_S0_BOUNDS = (np.log(1e-8), np.log(1e4))


class ConvergenceWarning(UserWarning):
    pass


class DuplicateKnotWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ChangePointDesign:
    """``K x (P+1)`` matrix of ``C_s(t_p)`` with the stratum ratios and variances."""

    knots: np.ndarray
    matrix: np.ndarray
    response: np.ndarray
    sigma_diag: np.ndarray
    uninformative: np.ndarray = field(default=None)
    strata: tuple[int, ...] = ()

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        X = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        y = np.asarray(self.response, dtype=float)
        s = np.asarray(self.sigma_diag, dtype=float)
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if X.shape != (y.size, knots.size) or s.shape != y.shape:
            raise ValueError("design dimensions disagree")
        if np.any(~(s > 0)):
            raise ValueError("sigma_diag entries must be positive")
        if self.uninformative is None:
            object.__setattr__(self, "uninformative", np.all(X == 0.0, axis=0))
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "matrix", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "sigma_diag", s)

    @property
    def K(self) -> int:
        return self.matrix.shape[0]

    def whitened(self) -> tuple[np.ndarray, np.ndarray]:
        w = 1.0 / np.sqrt(self.sigma_diag)
        return self.matrix * w[:, None], self.response * w


def default_knots(x: np.ndarray, quantile_range=(0.05, 0.95), P: int = 100) -> np.ndarray:
    """Pooled exposure quantiles at ``p / P`` inside ``quantile_range``.

    The exposure minimum is prepended as ``t_0``; repeated values (from
    discrete or heavily tied exposures) are dropped with a warning.
    """
    lo, hi = quantile_range
    p = np.arange(P + 1) / P
    # small slack so lo/hi expressed as decimals keep their end points
    probs = p[(p >= lo - 1e-12) & (p <= hi + 1e-12)]
    q = np.quantile(x, probs)
    knots = np.concatenate([[float(np.min(x))], q])
    uniq = np.unique(knots)
    if uniq.size < knots.size:
        dropped = knots.size - uniq.size
        if not (dropped == 1 and knots[0] == knots[1]):
            warnings.warn(f"{dropped} duplicate knots removed", DuplicateKnotWarning, stacklevel=2)
    return uniq


def build_changepoint_design(
    summaries: Sequence[StratumSummary],
    weights: Sequence[WeightFunction],
    knots: Sequence[float],
) -> ChangePointDesign:
    """Entry ``(s, p) = C_s(t_p)``; rows follow ``summaries``.

    Knots above every stratum's support give zero columns, which are kept
    but flagged in ``uninformative``.
    """
    knots = np.asarray(knots, dtype=float)
    uniq = np.unique(knots)
    if uniq.size < knots.size:
        warnings.warn(f"{knots.size - uniq.size} duplicate knots removed", DuplicateKnotWarning,
                      stacklevel=2)
        knots = uniq
    by_id = {w.stratum: w for w in weights}
    missing = [s.stratum for s in summaries if s.stratum not in by_id]
    if missing:
        raise ValueError(f"no weight function for strata {missing}")
    X = np.vstack([np.atleast_1d(weight_integral_above(by_id[s.stratum], knots)) for s in summaries])
    y = np.array([s.beta_hat for s in summaries])
    sig = np.array([s.se_beta**2 for s in summaries])
    zero = np.all(np.abs(X) <= 0.0, axis=0)
    if zero.any():
        warnings.warn(f"{int(zero.sum())} knots lie above every stratum and carry no information",
                      UserWarning, stacklevel=2)
    return ChangePointDesign(knots, X, y, sig, zero, tuple(s.stratum for s in summaries))


# --- single-effect regression -------------------------------------------------

def _ser(X, y, sigma0_sq, prior, d=None):
    """Core SER; returns ``(pi, mu, sigma, log_bf, lbf_model)``."""
    P1 = X.shape[1]
    d = (X * X).sum(axis=0) if d is None else d
    xty = X.T @ y
    if sigma0_sq <= 0.0:
        return prior.copy(), np.zeros(P1), np.zeros(P1), np.zeros(P1), 0.0
    ok = d > 0
    lbf = np.zeros(P1)
    mu = np.zeros(P1)
    sd = np.full(P1, np.sqrt(sigma0_sq))
    s2 = 1.0 / d[ok]
    z2 = xty[ok] ** 2 / d[ok]
    lbf[ok] = 0.5 * np.log(s2 / (s2 + sigma0_sq)) + 0.5 * z2 * sigma0_sq / (sigma0_sq + s2)
    post_var = 1.0 / (d[ok] + 1.0 / sigma0_sq)
    mu[ok] = post_var * xty[ok]
    sd[ok] = np.sqrt(post_var)
    with np.errstate(divide="ignore"):
        lw = lbf + np.log(prior)
    lbf_model = float(logsumexp(lw))
    pi = np.exp(lw - lbf_model)
    pi /= pi.sum()
    return pi, mu, sd, lbf, lbf_model


def _uniform(P1: int) -> np.ndarray:
    return np.full(P1, 1.0 / P1)


def single_effect_regression(X, y, sigma0_sq: float, prior_pi=None):
    """Bayesian single-effect regression on a whitened design.

    Parameters
    ----------
    X : (K, P+1) array
        Design scaled so the residual variance is 1 per row.
    y : (K,) array
        Whitened (residual) response.
    sigma0_sq : float
        Prior variance of the single nonzero coefficient.
    prior_pi : (P+1,) array, optional
        Prior inclusion probabilities; uniform by default.

    Returns
    -------
    pi, mu, sigma : arrays of length P+1
        Posterior inclusion probabilities and the posterior mean and sd of
        the coefficient given inclusion. Zero-norm columns keep their prior
        mass (Bayes factor 1), zero mean and the prior sd.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    prior = _uniform(X.shape[1]) if prior_pi is None else np.asarray(prior_pi, dtype=float)
    if prior.shape != (X.shape[1],) or abs(prior.sum() - 1.0) > 1e-10 or np.any(prior < 0):
        raise ValueError("prior_pi must be a probability vector over the columns")
    if sigma0_sq < 0:
        raise ValueError("sigma0_sq must be non-negative")
    pi, mu, sd, _, _ = _ser(X, y, float(sigma0_sq), prior)
    return pi, mu, sd


def ser_log_evidence(X, y, sigma0_sq: float, prior_pi=None) -> float:
    """Log Bayes factor of the single-effect model against the null."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    prior = _uniform(X.shape[1]) if prior_pi is None else np.asarray(prior_pi, dtype=float)
    return _ser(X, np.asarray(y, dtype=float), float(sigma0_sq), prior)[4]


def _optimize_sigma0(X, r, prior, d, current: float) -> float:
    def neg(logv):
        return -_ser(X, r, float(np.exp(logv)), prior, d)[4]

    res = minimize_scalar(neg, bounds=LOG_S0_BOUNDS, method="bounded", options={"xatol": 1e-6})
    cand = float(np.exp(res.x))
    best, best_lbf = cand, -float(res.fun)
    cur_lbf = _ser(X, r, current, prior, d)[4]
    if cur_lbf > best_lbf:
        best, best_lbf = current, cur_lbf
    # the null model (sigma0 = 0) has log BF 0
    return best if best_lbf > 0.0 else 0.0


# --- IBSS ---------------------------------------------------------------------

@dataclass(frozen=True)
class SusieFit:
    pi_star: np.ndarray
    mu_star: np.ndarray
    sigma_star: np.ndarray
    sigma0_sq: np.ndarray
    elbo_trace: list
    l_star: int
    detected: tuple[int, ...]
    converged: bool
    n_iter: int
    knots: np.ndarray | None = None
    lbf_model: np.ndarray | None = None

    @property
    def L(self) -> int:
        return self.pi_star.shape[0]

    def coefficient_means(self) -> np.ndarray:
        """Posterior mean of each knot coefficient, summed over effects."""
        return (self.pi_star * self.mu_star).sum(axis=0)

    def to_dict(self) -> dict:
        return {
            "knots": None if self.knots is None else self.knots.tolist(),
            "pi_star": self.pi_star.tolist(),
            "mu_star": self.mu_star.tolist(),
            "sigma_star": self.sigma_star.tolist(),
            "sigma0_sq": self.sigma0_sq.tolist(),
            "elbo_trace": list(self.elbo_trace),
            "l_star": self.l_star,
            "detected_effects": [l + 1 for l in self.detected],
            "converged": self.converged,
            "n_iter": self.n_iter,
        }


def _detected(pi, s0, var_y, P1) -> tuple[int, ...]:
    thresh = 1e-6 * var_y if var_y > 0 else 0.0
    return tuple(l for l in range(pi.shape[0])
                 if s0[l] > thresh and pi[l].max() > 2.0 / P1)


def susie_ibss(
    design: ChangePointDesign,
    L: int = 10,
    tol: float = 1e-6,
    max_iter: int = 100,
    estimate_sigma0: bool = True,
    prior_pi=None,
    sigma0_init: float | None = None,
) -> SusieFit:
    """Fit the sum of ``L`` single effects by iterative Bayesian stepwise selection.

    Each sweep updates every effect against the residual of the others,
    optionally re-estimating its prior variance by maximizing the SER
    evidence over ``log sigma0^2`` in ``[1e-8, 1e4]``. Iteration stops when
    the ELBO changes by less than ``tol``; hitting ``max_iter`` returns the
    current fit with ``converged=False`` and a :class:`ConvergenceWarning`.

    An effect is counted in ``l_star`` when its prior variance exceeds
    ``1e-6`` times the whitened response variance and its largest inclusion
    probability exceeds twice the uniform prior mass.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    X, y = design.whitened()
    K, P1 = X.shape
    prior = _uniform(P1) if prior_pi is None else np.asarray(prior_pi, dtype=float)
    d = (X * X).sum(axis=0)
    var_y = float(np.var(y, ddof=1)) if K > 1 else 0.0
    s0 = np.full(L, sigma0_init if sigma0_init is not None else (0.2 * var_y if var_y > 0 else 1.0))
    pi = np.tile(prior, (L, 1))
    mu = np.zeros((L, P1))
    sd = np.zeros((L, P1))
    lbfm = np.zeros(L)
    kl = np.zeros(L)
    fitted = np.zeros((L, K))
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        for l in range(L):
            r = y.copy()
            for k in range(L):
                if k != l:
                    r = r - fitted[k]
            if estimate_sigma0:
                s0[l] = _optimize_sigma0(X, r, prior, d, float(s0[l]))
            pi[l], mu[l], sd[l], _, lbfm[l] = _ser(X, r, float(s0[l]), prior, d)
            fitted[l] = X @ (pi[l] * mu[l])
            second = float(np.sum(pi[l] * (mu[l] ** 2 + sd[l] ** 2) * d))
            kl[l] = -lbfm[l] - 0.5 * (-2.0 * float(r @ fitted[l]) + second)
        resid = y - fitted.sum(axis=0)
        erss = float(resid @ resid) + sum(
            float(np.sum(pi[l] * (mu[l] ** 2 + sd[l] ** 2) * d)) - float(fitted[l] @ fitted[l])
            for l in range(L)
        )
        elbo = -0.5 * K * np.log(2 * np.pi) - 0.5 * erss - float(kl.sum())
        trace.append(float(elbo))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"IBSS did not converge in {max_iter} iterations", ConvergenceWarning,
                      stacklevel=2)
    det = _detected(pi, s0, var_y, P1)
    return SusieFit(pi, mu, sd, s0.copy(), trace, len(det), det, converged, it,
                    design.knots.copy(), lbfm.copy())


# --- credible sets and location summaries -----------------------------------

@dataclass(frozen=True)
class CredibleSet:
    indices: tuple[int, ...]
    mass: float
    interval: tuple[float, float]
    mean: float
    mode: float
    mode_index: int
    one_sided: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "indices": list(self.indices),
            "mass": self.mass,
            "interval": list(self.interval),
            "mean": self.mean,
            "mode": self.mode,
            "mode_index": self.mode_index,
            "one_sided": None if self.one_sided is None else list(self.one_sided),
        }


def credible_set(pi_row, level: float = 0.95, knots=None, one_sided: bool = False) -> CredibleSet:
    """Smallest set of knots, taken by descending probability, reaching ``level``.

    Positions default to the column indices when ``knots`` is omitted. The
    one-sided form ``(t_0, q)`` uses the smallest knot ``q`` whose
    cumulative mass in knot order reaches ``level``.
    """
    pi = np.asarray(pi_row, dtype=float)
    t = np.arange(pi.size, dtype=float) if knots is None else np.asarray(knots, dtype=float)
    if t.shape != pi.shape:
        raise ValueError("knots and pi_row lengths differ")
    order = np.argsort(-pi, kind="stable")
    cum = np.cumsum(pi[order])
    n_in = int(np.searchsorted(cum, level - 1e-12, side="left")) + 1
    n_in = min(n_in, pi.size)
    chosen = np.sort(order[:n_in])
    mode_idx = int(order[0])
    side = None
    if one_sided:
        j = min(int(np.searchsorted(np.cumsum(pi), level - 1e-12, side="left")), pi.size - 1)
        side = (float(t[0]), float(t[j]))
    return CredibleSet(
        tuple(int(i) for i in chosen), float(pi[chosen].sum()),
        (float(t[chosen].min()), float(t[chosen].max())),
        float(pi @ t / pi.sum()), float(t[mode_idx]), mode_idx, side,
    )


def changepoint_location(pi_row, knots, level: float = 0.95) -> tuple[CredibleSet, float]:
    """Credible set of the change-point location with column 0 left out.

    Column 0 encodes the global slope rather than a change-point, so its
    mass is removed and the rest renormalized. Returns the set and the
    removed mass; all-zero remaining mass yields a uniform row.
    """
    pi = np.asarray(pi_row, dtype=float)
    rest = pi[1:]
    total = rest.sum()
    rest = rest / total if total > 0 else np.full(rest.size, 1.0 / rest.size)
    return credible_set(rest, level, np.asarray(knots)[1:]), float(pi[0])


# --- counterfactual prediction and effect curves ------------------------------

def partial_contrast(x_star, x_i, t_p):
    """``(x* - t)_+ - (x_i - t)_+`` (broadcasts)."""
    out = np.maximum(np.asarray(x_star, dtype=float) - t_p, 0.0) - np.maximum(
        np.asarray(x_i, dtype=float) - t_p, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def counterfactual_predict(fit: SusieFit, knots, data: Dataset, x_star: float):
    """Posterior mean outcome of every individual had their exposure been ``x_star``.

    Returns
    -------
    predictions : (n,) array
    mean : float
    """
    knots = np.asarray(knots, dtype=float)
    F = partial_contrast(x_star, data.x[:, None], knots[None, :])
    pred = data.y + F @ fit.coefficient_means()
    return pred, float(pred.mean())


def _h_design(x_grid, knots):
    x = np.atleast_1d(np.asarray(x_grid, dtype=float))
    return x, partial_contrast(x[:, None], 0.0, np.asarray(knots, dtype=float)[None, :])


def effect_posterior_mean(fit: SusieFit, knots, x_grid) -> EffectCurve:
    """Posterior mean ``h(x) = sum_p f(x; 0, t_p) E[b_p]`` (no band)."""
    x, F = _h_design(x_grid, knots)
    b = fit.coefficient_means()
    h = F @ b
    hp = np.asarray((x[:, None] >= np.asarray(knots)[None, :]).astype(float) @ b)
    return EffectCurve(x, h, "susie_posterior", h_prime=hp)


def _posterior_draws(fit: SusieFit, n_samples: int, seed) -> np.ndarray:
    """``(n_samples, P+1)`` draws of the summed knot coefficients."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    L, P1 = fit.pi_star.shape
    B = np.zeros((n_samples, P1))
    rows = np.arange(n_samples)
    for l in range(L):
        p = fit.pi_star[l] / fit.pi_star[l].sum()
        idx = rng.choice(P1, size=n_samples, p=p)
        b = fit.mu_star[l, idx] + fit.sigma_star[l, idx] * rng.standard_normal(n_samples)
        np.add.at(B, (rows, idx), b)
    return B


def effect_credible_band(fit: SusieFit, knots, x_grid, n_samples: int = 10_000,
                         level: float = 0.95, seed=0) -> EffectCurve:
    """Posterior mean curve with pointwise mixture-normal credible bands.

    One set of posterior draws is shared across the grid, so the band is
    deterministic given ``seed``.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    x, F = _h_design(x_grid, knots)
    B = _posterior_draws(fit, n_samples, seed)
    draws = B @ F.T
    lo, hi = np.quantile(draws, [(1 - level) / 2, (1 + level) / 2], axis=0)
    mean = effect_posterior_mean(fit, knots, x)
    return EffectCurve(x, mean.h, "susie_posterior", lo, hi, mean.h_prime, level=level)


def effect_credible_interval(fit: SusieFit, knots, x_star: float, n_samples: int = 10_000,
                             level: float = 0.95, seed=0) -> tuple[float, float]:
    band = effect_credible_band(fit, knots, [x_star], n_samples, level, seed)
    return float(band.h_lo[0]), float(band.h_hi[0])
