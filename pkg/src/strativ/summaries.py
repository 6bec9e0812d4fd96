"""Stratum-specific IV associations, Wald ratios and weight functions."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .stratify import StratumAssignment

__all__ = [
    "StratumSummary",
    "WeightFunction",
    "WeakStratumWarning",
    "StratumError",
    "slope",
    "slope_cov",
    "wald_se",
    "stratum_associations",
    "estimate_weight_function",
    "estimate_weight_functions",
    "weight_integral_above",
    "default_grid",
]


class StratumError(ValueError):
    """A stratum cannot support an IV estimate (too small, constant instrument)."""


class WeakStratumWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StratumSummary:
    stratum: int
    n_s: int
    x_bar: float
    alpha_hat: float
    se_alpha: float
    theta_hat: float
    se_theta: float
    beta_hat: float
    se_beta: float
    weak: bool = False
    gamma_hat: float | None = None
    se_gamma: float | None = None
    cov_theta_alpha: float = 0.0
    cov_theta_gamma: float | None = None
    cov_alpha_gamma: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _fit_slope(z: np.ndarray, v: np.ndarray) -> tuple[float, np.ndarray, float]:
    n = len(z)
    if n < 3:
        raise StratumError(f"need at least 3 observations for a slope standard error, got {n}")
    zc = z - z.mean()
    sxx = float(zc @ zc)
    if sxx <= 0.0:
        raise StratumError("instrument is constant within the stratum")
    vc = v - v.mean()
    b = float(zc @ vc) / sxx
    return b, vc - b * zc, sxx


def slope(z: np.ndarray, v: np.ndarray) -> tuple[float, float]:
    """OLS slope of ``v`` on ``z`` with its classical standard error."""
    b, resid, sxx = _fit_slope(z, v)
    se = np.sqrt(float(resid @ resid) / (len(z) - 2) / sxx)
    return b, float(se)


def slope_cov(z: np.ndarray, u: np.ndarray, v: np.ndarray) -> float:
    """Sampling covariance of the slopes of ``u`` and ``v`` on the same ``z``."""
    _, ru, sxx = _fit_slope(z, u)
    _, rv, _ = _fit_slope(z, v)
    return float(ru @ rv) / (len(z) - 2) / sxx


def wald_se(alpha: float, se_a: float, theta: float, se_t: float, order: str = "second") -> float:
    """Delta-method standard error of the ratio ``theta / alpha``.

    ``order="first"`` ignores uncertainty in ``alpha``.
    """
    if alpha == 0:
        raise ZeroDivisionError("Wald ratio undefined for alpha = 0")
    if order == "first":
        return se_t / abs(alpha)
    if order == "second":
        return float(np.sqrt(se_t**2 / alpha**2 + (theta / alpha) ** 2 * se_a**2 / alpha**2))
    raise ValueError(f"unknown se order {order!r}")


def stratum_associations(
    data: Dataset,
    assignment: StratumAssignment,
    se_order: str = "second",
    weak_threshold: float = 4.0,
    with_gamma: bool = False,
) -> list[StratumSummary]:
    """Per-stratum instrument associations, sorted by ascending exposure mean.

    A stratum with ``|alpha_hat| / se_alpha < weak_threshold`` is flagged
    ``weak`` and a :class:`WeakStratumWarning` is issued; fitting proceeds.
    """
    out = []
    weak_ids = []
    for k in range(1, assignment.K + 1):
        idx = assignment.members(k)
        z, x, y = data.z[idx], data.x[idx], data.y[idx]
        try:
            a, se_a = slope(z, x)
            t, se_t = slope(z, y)
        except StratumError as exc:
            raise StratumError(f"stratum {k}: {exc}") from None
        if a == 0:
            raise StratumError(f"stratum {k}: zero instrument-exposure association")
        g = se_g = c_tg = c_ag = None
        if with_gamma:
            g, se_g = slope(z, z * x)
            c_tg, c_ag = slope_cov(z, y, z * x), slope_cov(z, x, z * x)
        weak = not (abs(a) >= weak_threshold * se_a)
        if weak:
            weak_ids.append(k)
        out.append(StratumSummary(
            stratum=k, n_s=int(idx.size), x_bar=float(x.mean()),
            alpha_hat=a, se_alpha=se_a, theta_hat=t, se_theta=se_t,
            beta_hat=t / a, se_beta=wald_se(a, se_a, t, se_t, se_order),
            weak=weak, gamma_hat=g, se_gamma=se_g, cov_theta_alpha=slope_cov(z, y, x),
            cov_theta_gamma=c_tg, cov_alpha_gamma=c_ag,
        ))
    if weak_ids:
        warnings.warn(
            f"{len(weak_ids)} weak strata (|alpha|/se < {weak_threshold}): {weak_ids}",
            WeakStratumWarning, stacklevel=2,
        )
    out.sort(key=lambda s: s.x_bar)
    return out


@dataclass(frozen=True)
class WeightFunction:
    """Upper integral ``C(t) = int_t^inf W_s(x) dx`` of a stratum weight function on a grid.

    Estimated weight functions carry the requested grid plus every exposure
    value in the stratum. ``C`` is linear between those nodes, so
    interpolation is exact; it is 1 at the stratum minimum and 0 at the
    maximum.
    """

    stratum: int
    grid: np.ndarray
    cum_above: np.ndarray
    x_min: float
    x_max: float

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        c = np.asarray(self.cum_above, dtype=float)
        if g.ndim != 1 or g.shape != c.shape or g.size < 1:
            raise ValueError("grid and cum_above must be 1-D arrays of equal length")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        if not np.all(np.isfinite(c)):
            raise ValueError("cum_above must be finite")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "cum_above", c)

    def __call__(self, t):
        return weight_integral_above(self, t)

    def density(self) -> tuple[np.ndarray, np.ndarray]:
        """Segment midpoints and the implied piecewise-constant weight ``-dC/dt``."""
        mids = 0.5 * (self.grid[1:] + self.grid[:-1])
        return mids, -np.diff(self.cum_above) / np.diff(self.grid)


def default_grid(x: np.ndarray, P: int = 100) -> np.ndarray:
    """Pooled exposure quantiles at ``p / P`` for ``p = 0..P`` (duplicates dropped)."""
    return np.unique(np.quantile(x, np.linspace(0.0, 1.0, P + 1)))


def _cov_positive_part(z: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Sample ``Cov(Z, (X - t)_+)`` for every ``t`` (denominator ``n``)."""
    n = len(z)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    zc = (z - z.mean())[order]
    # suffix sums over individuals with x > t
    s_zx = np.concatenate([np.cumsum((zc * xs)[::-1])[::-1], [0.0]])
    s_z = np.concatenate([np.cumsum(zc[::-1])[::-1], [0.0]])
    first = np.searchsorted(xs, t, side="right")
    return (s_zx[first] - t * s_z[first]) / n


def _weight_values(z, x, grid, stratum):
    zc = z - z.mean()
    denom = float(zc @ (x - x.mean())) / len(z)
    scale = np.std(z) * np.std(x)
    if denom == 0.0 or abs(denom) <= 1e-12 * scale:
        raise StratumError(f"stratum {stratum}: instrument-exposure covariance is zero")
    lo, hi = x.min(), x.max()
    # Between consecutive stratum exposures C is linear in t, so adding them
    # as nodes makes the interpolated representation exact.
    grid = np.union1d(grid, x)
    cum = _cov_positive_part(z, x, grid) / denom
    # below the support (X - t)_+ = X - t exactly; above it the tail is empty
    cum[grid <= lo] = 1.0
    cum[grid >= hi] = 0.0
    return WeightFunction(stratum, grid, cum, float(lo), float(hi))


def estimate_weight_function(data: Dataset, assignment: StratumAssignment, stratum: int,
                             grid: Sequence[float]) -> WeightFunction:
    """Nonparametric weight function of one stratum via ``Cov(Z,(X-t)_+) / Cov(Z,X)``."""
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    idx = assignment.members(stratum)
    if idx.size < 2:
        raise StratumError(f"stratum {stratum} has fewer than 2 members")
    return _weight_values(data.z[idx], data.x[idx], grid, stratum)


def estimate_weight_functions(data: Dataset, assignment: StratumAssignment,
                              grid: Sequence[float] | None = None, P: int = 100) -> list[WeightFunction]:
    if grid is None:
        grid = default_grid(data.x, P)
    return [estimate_weight_function(data, assignment, k, grid) for k in range(1, assignment.K + 1)]


def weight_integral_above(w: WeightFunction, t):
    """``int_t^inf W(x) dx`` by linear interpolation; 1 below the grid, 0 above it."""
    t_arr = np.asarray(t, dtype=float)
    out = np.interp(t_arr, w.grid, w.cum_above, left=1.0, right=0.0)
    if w.grid.size == 1:
        out = np.where(t_arr <= w.grid[0], 1.0, 0.0)
    return float(out) if out.ndim == 0 else out
