"""Penalized weighted least squares on stratum Wald ratios.

Both design modes regress the stratum ratios ``beta_hat`` on basis
features: ``sof`` uses inner products with the stratum weight functions,
``sos`` evaluates the basis at the stratum exposure means. All solves are
done on data whitened by ``Sigma^{-1/2}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .basis import BasisSet
from .curves import EffectCurve
from .summaries import StratumSummary, WeightFunction

__all__ = [
    "DesignMatrix",
    "FitResult",
    "SingularSystemError",
    "DesignError",
    "build_sof_design",
    "build_sos_design",
    "penalty_matrix",
    "fit_weighted_ridge",
    "gcv_select",
    "default_lambda_grid",
    "effect_from_fit",
]


class SingularSystemError(np.linalg.LinAlgError):
    """The penalized normal matrix is (numerically) singular."""

    def __init__(self, message: str, cond: float):
        super().__init__(f"{message} (condition estimate {cond:.3g})")
        self.cond = cond


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class DesignMatrix:
    """``K x L`` regression design with stratum variances and roughness penalty."""

    entries: np.ndarray
    mode: str
    sigma_diag: np.ndarray
    penalty: np.ndarray
    m: int = 2
    strata: tuple[int, ...] = ()

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.entries, dtype=float))
        s = np.asarray(self.sigma_diag, dtype=float)
        R = np.asarray(self.penalty, dtype=float)
        if self.mode not in ("sof", "sos"):
            raise DesignError(f"unknown design mode {self.mode!r}")
        if X.shape[0] < 1 or s.shape != (X.shape[0],):
            raise DesignError("sigma_diag must have one entry per design row")
        if np.any(~(s > 0)):
            raise DesignError("sigma_diag entries must be positive")
        if R.shape != (X.shape[1], X.shape[1]):
            raise DesignError("penalty must be L x L")
        if not np.array_equal(R, R.T):
            raise DesignError("penalty must be symmetric")
        object.__setattr__(self, "entries", X)
        object.__setattr__(self, "sigma_diag", s)
        object.__setattr__(self, "penalty", R)

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def L(self) -> int:
        return self.entries.shape[1]

    def permuted(self, order) -> "DesignMatrix":
        order = np.asarray(order)
        strata = tuple(np.asarray(self.strata)[order]) if self.strata else ()
        return DesignMatrix(self.entries[order], self.mode, self.sigma_diag[order],
                            self.penalty, self.m, strata)


@dataclass(frozen=True)
class FitResult:
    b_hat: np.ndarray
    cov_b: np.ndarray
    lam: float
    gcv_trace: list = field(default_factory=list)
    gcv: float | None = None
    trace_hat: float | None = None
    sse: float | None = None

    def to_dict(self, basis: BasisSet | None = None) -> dict:
        out = {
            "b_hat": self.b_hat.tolist(),
            "cov_b": self.cov_b.tolist(),
            "lambda": self.lam,
            "gcv": self.gcv,
            "trace_hat": self.trace_hat,
            "sse": self.sse,
            "gcv_trace": [
                {"lambda": lam, "gcv": score, "status": status} for lam, score, status in self.gcv_trace
            ],
        }
        if basis is not None:
            out["basis"] = basis.to_dict()
            out["names"] = basis.names
            if hasattr(basis, "to_monomial"):
                T = basis.to_monomial()
                out["monomial_coefficients"] = (T @ self.b_hat).tolist()
                out["monomial_cov"] = (T @ self.cov_b @ T.T).tolist()
        return out


def penalty_matrix(basis: BasisSet, m: int, domain: tuple[float, float]) -> np.ndarray:
    """Roughness penalty ``R_ij = <D^m phi_i, D^m phi_j>`` over ``domain``."""
    R = basis.penalty(m, domain)
    return 0.5 * (R + R.T)


def _domain_of(weights: Sequence[WeightFunction]) -> tuple[float, float]:
    return (min(w.grid[0] for w in weights), max(w.grid[-1] for w in weights))


def build_sof_design(
    weights: Sequence[WeightFunction],
    basis: BasisSet,
    summaries: Sequence[StratumSummary] | None = None,
    m: int = 2,
    domain: tuple[float, float] | None = None,
) -> DesignMatrix:
    """Scalar-on-function design: entry ``(s, l) = <phi_l, W_s>``.

    When ``summaries`` are given, rows follow their order and ``sigma_diag``
    holds ``se(beta_hat_s)^2``; otherwise rows follow ``weights`` with unit
    variances.
    """
    if not weights:
        raise DesignError("need one weight function per stratum")
    by_id = {w.stratum: w for w in weights}
    if summaries is not None:
        missing = [s.stratum for s in summaries if s.stratum not in by_id]
        if missing:
            raise DesignError(f"no weight function for strata {missing}")
        weights = [by_id[s.stratum] for s in summaries]
        sigma = np.array([s.se_beta**2 for s in summaries])
    else:
        sigma = np.ones(len(weights))
    X = np.vstack([basis.weight_inner(w) for w in weights])
    dom = domain or _domain_of(weights)
    return DesignMatrix(X, "sof", sigma, penalty_matrix(basis, m, dom), m,
                        tuple(w.stratum for w in weights))


def build_sos_design(
    summaries: Sequence[StratumSummary],
    basis: BasisSet,
    m: int = 2,
    domain: tuple[float, float] | None = None,
) -> DesignMatrix:
    """Scalar-on-scalar design: entry ``(s, l) = phi_l(x_bar_s)``."""
    if not summaries:
        raise DesignError("summaries must be non-empty")
    xbar = np.array([s.x_bar for s in summaries])
    sigma = np.array([s.se_beta**2 for s in summaries])
    dom = domain or (float(xbar.min()), float(xbar.max()))
    return DesignMatrix(basis.evaluate(xbar), "sos", sigma, penalty_matrix(basis, m, dom), m,
                        tuple(s.stratum for s in summaries))


def _penalty_root(R: np.ndarray) -> np.ndarray:
    """``G`` with ``G.T @ G == R`` for symmetric PSD ``R``."""
    vals, vecs = np.linalg.eigh(R)
    keep = vals > vals.max(initial=0.0) * 1e-14
    return (np.sqrt(vals[keep])[:, None] * vecs[:, keep].T)


def _solve(design: DesignMatrix, beta_hats: np.ndarray, lam: float):
    w = 1.0 / np.sqrt(design.sigma_diag)
    Xw = design.entries * w[:, None]
    yw = beta_hats * w
    G = _penalty_root(design.penalty) if lam > 0 else np.zeros((0, design.L))
    A = np.vstack([Xw, np.sqrt(lam) * G])
    if A.shape[0] < design.L:
        raise SingularSystemError("fewer equations than coefficients", float("inf"))
    Q, Rtri = np.linalg.qr(A)
    d = np.abs(np.diag(Rtri))
    cond = float(np.linalg.cond(Rtri)) if d.min() > 0 else float("inf")
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularSystemError("penalized normal matrix is singular", cond)
    rhs = Q.T @ np.concatenate([yw, np.zeros(A.shape[0] - design.K)])
    b = np.linalg.solve(Rtri, rhs)
    Rinv = np.linalg.solve(Rtri, np.eye(design.L))
    Minv = Rinv @ Rinv.T
    # sandwich M^-1 X' S^-1 X M^-1 with XwRinv = Xw @ Rinv
    XR = Xw @ Rinv
    cov = Rinv @ (XR.T @ XR) @ Rinv.T
    cov = 0.5 * (cov + cov.T)
    H_diag_sum = float(np.sum(XR * XR))  # trace of Xw M^-1 Xw'
    resid = yw - Xw @ b
    return b, cov, H_diag_sum, float(resid @ resid), Minv


def fit_weighted_ridge(design: DesignMatrix, beta_hats, lam: float) -> FitResult:
    """Closed-form penalized weighted least squares.

    ``b_hat = (X' S^-1 X + lam R)^-1 X' S^-1 beta_hat`` with the sandwich
    covariance treating ``S`` as known.

    Raises
    ------
    SingularSystemError
        When the penalized normal matrix is singular; carries ``cond``.
    """
    beta_hats = np.asarray(beta_hats, dtype=float)
    if beta_hats.shape != (design.K,):
        raise DesignError(f"expected {design.K} ratio estimates, got {beta_hats.shape}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    b, cov, tr, sse, _ = _solve(design, beta_hats, float(lam))
    gcv = _gcv_score(design.K, sse, tr)
    return FitResult(b, cov, float(lam), [], gcv, tr, sse)


def _gcv_score(K: int, sse: float, tr: float) -> float | None:
    denom = K - tr
    if denom <= 1e-8 * K:
        return None
    return K * sse / denom**2


def default_lambda_grid() -> np.ndarray:
    return np.concatenate([[0.0], np.logspace(-6, 4, 50)])


def gcv_select(design: DesignMatrix, beta_hats, lambda_grid=None) -> tuple[float, FitResult]:
    """Pick ``lambda`` minimizing ``GCV = K * SSE / (K - tr H)^2``.

    Candidates with a degenerate denominator or a singular system are
    skipped and recorded in ``gcv_trace`` with a status string. Ties go
    to the larger ``lambda``.
    """
    beta_hats = np.asarray(beta_hats, dtype=float)
    grid = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("lambda grid is empty")
    if np.any(grid < 0):
        raise ValueError("lambda values must be non-negative")
    trace = []
    best = None
    for lam in grid:
        try:
            fit = fit_weighted_ridge(design, beta_hats, float(lam))
        except SingularSystemError as exc:
            trace.append((float(lam), None, f"singular: cond={exc.cond:.3g}"))
            continue
        if fit.gcv is None:
            trace.append((float(lam), None, "excluded: K - tr(H) = 0"))
            continue
        trace.append((float(lam), fit.gcv, "ok"))
        if best is None or fit.gcv < best.gcv * (1 - 1e-12) or (
            fit.gcv <= best.gcv * (1 + 1e-12) and fit.lam > best.lam
        ):
            best = fit
    if best is None:
        raise SingularSystemError("no lambda in the grid gives a usable fit",
                                  float("inf"))
    return best.lam, FitResult(best.b_hat, best.cov_b, best.lam, trace, best.gcv,
                               best.trace_hat, best.sse)


def effect_from_fit(fit: FitResult, basis: BasisSet, x_grid, level: float = 0.95) -> EffectCurve:
    """``h'(x) = phi(x)' b`` and ``h(x) = [int_0^x phi]' b`` with Wald bands."""
    x = np.atleast_1d(np.asarray(x_grid, dtype=float))
    if len(basis) != fit.b_hat.size:
        raise DesignError("basis and fit dimensions differ")
    q = stats.norm.ppf(0.5 + level / 2)
    A = basis.antiderivative(x)
    A[x == 0.0] = 0.0
    P = basis.evaluate(x)
    h = A @ fit.b_hat
    hp = P @ fit.b_hat
    sd_h = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", A, fit.cov_b, A), 0.0))
    sd_hp = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", P, fit.cov_b, P), 0.0))
    return EffectCurve(x, h, "parametric_frequentist", h - q * sd_h, h + q * sd_h,
                       hp, hp - q * sd_hp, hp + q * sd_hp, level)
