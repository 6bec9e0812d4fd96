"""End-to-end analysis routes built from the individual stages.

These functions do no file IO; :mod:`strativ.cli` wraps them with input
parsing and output writing, and :mod:`strativ.simulation` calls them once
per replication.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .basis import BasisSet, PolynomialBasis
from .curves import EffectCurve
from .data import AnalysisConfig, Dataset
from .linearity import QTestResult, q_test
from .regression import (
    DesignMatrix,
    FitResult,
    build_sof_design,
    build_sos_design,
    effect_from_fit,
    fit_weighted_ridge,
    gcv_select,
)
from .stratify import StratumAssignment, stratify
from .summaries import (
    StratumSummary,
    WeakStratumWarning,
    WeightFunction,
    default_grid,
    estimate_weight_functions,
    stratum_associations,
)
from .susie import (
    ChangePointDesign,
    SusieFit,
    build_changepoint_design,
    changepoint_location,
    credible_set,
    default_knots,
    effect_credible_band,
    effect_posterior_mean,
    susie_ibss,
)

__all__ = [
    "StageOne",
    "stage_one",
    "ChangepointAnalysis",
    "run_changepoint",
    "changepoint_report",
    "ParametricAnalysis",
    "run_parametric",
    "default_curve_grid",
]


@dataclass(frozen=True)
class StageOne:
    assignment: StratumAssignment
    summaries: list[StratumSummary]
    weights: list[WeightFunction] | None
    weak_strata: tuple[int, ...]


def stage_one(data: Dataset, config: AnalysisConfig, with_weights: bool = True,
              with_gamma: bool = False, grid: Sequence[float] | None = None,
              quiet: bool = False) -> StageOne:
    """Stratify, then compute per-stratum associations and weight functions."""
    assignment = stratify(data, config)
    with warnings.catch_warnings():
        if quiet:
            warnings.simplefilter("ignore", WeakStratumWarning)
        summaries = stratum_associations(data, assignment, config.se_order,
                                         config.weak_stratum_threshold, with_gamma)
    weights = None
    if with_weights:
        g = default_grid(data.x, config.candidate_count) if grid is None else grid
        weights = estimate_weight_functions(data, assignment, g)
    weak = tuple(s.stratum for s in summaries if s.weak)
    return StageOne(assignment, summaries, weights, weak)


def default_curve_grid(x: np.ndarray, points: int = 101) -> np.ndarray:
    """Evenly spaced grid over the central 98% of the exposure, with 0 added."""
    lo, hi = np.quantile(x, [0.01, 0.99])
    g = np.linspace(lo, hi, points)
    return np.unique(np.concatenate([g, [0.0]]))


@dataclass(frozen=True)
class ChangepointAnalysis:
    stage: StageOne
    design: ChangePointDesign
    fit: SusieFit
    curve: EffectCurve

    def report(self, level: float = 0.95) -> list[dict]:
        return changepoint_report(self.fit, self.design.knots, level)


def changepoint_report(fit: SusieFit, knots, level: float = 0.95) -> list[dict]:
    """One entry per detected effect, in effect order.

    ``credible_set`` is over all columns as fitted; ``location`` leaves out
    column 0, which carries the global slope rather than a change-point.
    """
    knots = np.asarray(knots)
    out = []
    for l in fit.detected:
        raw = credible_set(fit.pi_star[l], level, knots, one_sided=True)
        loc, slope_mass = changepoint_location(fit.pi_star[l], knots, level)
        out.append({
            "effect": l + 1,
            "sigma0_sq": float(fit.sigma0_sq[l]),
            "credible_set": raw.to_dict(),
            "slope_column_mass": slope_mass,
            "location": loc.to_dict(),
        })
    return out


def run_changepoint(data: Dataset, config: AnalysisConfig, knots: Sequence[float] | None = None,
                    curve_grid: Sequence[float] | None = None, band: bool = True,
                    quiet: bool = False) -> ChangepointAnalysis:
    """Stratify, summarize, build the change-point design and fit SuSiE."""
    stage = stage_one(data, config, quiet=quiet)
    if knots is None:
        with warnings.catch_warnings():
            if quiet:
                warnings.simplefilter("ignore")
            knots = default_knots(data.x, config.knot_quantile_range, config.candidate_count)
    with warnings.catch_warnings():
        if quiet:
            warnings.simplefilter("ignore")
        design = build_changepoint_design(stage.summaries, stage.weights, knots)
        fit = susie_ibss(design, config.max_effects, config.tol, config.max_iter)
    grid = default_curve_grid(data.x) if curve_grid is None else np.asarray(curve_grid, dtype=float)
    if band:
        curve = effect_credible_band(fit, design.knots, grid, config.posterior_samples,
                                     config.level, config.seed)
    else:
        curve = effect_posterior_mean(fit, design.knots, grid)
    return ChangepointAnalysis(stage, design, fit, curve)


@dataclass(frozen=True)
class ParametricAnalysis:
    stage: StageOne
    basis: BasisSet
    design: DesignMatrix
    fit: FitResult
    curve: EffectCurve


def _exposure_domain(x) -> tuple[float, float]:
    return float(np.min(x)), float(np.max(x))


def run_parametric(data: Dataset, config: AnalysisConfig, basis: BasisSet, mode: str = "sof",
                   lam="auto", lambda_grid=None, curve_grid: Sequence[float] | None = None,
                   quiet: bool = False, stage: StageOne | None = None) -> ParametricAnalysis:
    """Fit ``h'`` in a fixed basis by penalized weighted least squares.

    ``lam="auto"`` selects the penalty by GCV over ``lambda_grid``.
    """
    if mode not in ("sof", "sos"):
        raise ValueError("mode must be 'sof' or 'sos'")
    if stage is None:
        stage = stage_one(data, config, with_weights=(mode == "sof"), quiet=quiet)
    dom = _exposure_domain(data.x)
    m = config.penalty_order
    if mode == "sof":
        design = build_sof_design(stage.weights, basis, stage.summaries, m, dom)
    else:
        design = build_sos_design(stage.summaries, basis, m, dom)
    beta = np.array([s.beta_hat for s in stage.summaries])
    if lam == "auto":
        _, fit = gcv_select(design, beta, lambda_grid)
    else:
        fit = fit_weighted_ridge(design, beta, float(lam))
    grid = default_curve_grid(data.x) if curve_grid is None else np.asarray(curve_grid, dtype=float)
    curve = effect_from_fit(fit, basis, grid, config.level)
    return ParametricAnalysis(stage, basis, design, fit, curve)


def linearity(data: Dataset, config: AnalysisConfig, variant: str = "standard",
              stage: StageOne | None = None, correlated: bool = True) -> QTestResult:
    if stage is None:
        stage = stage_one(data, config, with_weights=False, with_gamma=(variant == "factorization"))
    return q_test(stage.summaries, variant, correlated)


def scaled_polynomial(degree: int, x) -> PolynomialBasis:
    """Polynomial basis centred and scaled to the exposure for conditioning."""
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x))
    return PolynomialBasis(degree, center=float(np.mean(x)), scale=sd if sd > 0 else 1.0)
