"""Stratification-based instrumental-variable analysis of nonlinear exposure effects.

The workflow: stratify on the counterfactual exposure, estimate stratum
Wald ratios and weight functions, then either fit a parametric effect
shape (:mod:`strativ.regression`) or locate change-points with a sum of
single effects (:mod:`strativ.susie`).
"""
__version__ = "0.1.0"

from .basis import IndicatorBasis, PiecewiseLinearBasis, PolynomialBasis, parse_basis
from .curves import EffectCurve
from .data import AnalysisConfig, DataError, Dataset, load_config, load_dataset, write_dataset
from .linearity import QTestResult, q_linearity, q_linearity_decomposition, q_linearity_factorization
from .regression import (
    DesignMatrix,
    FitResult,
    build_sof_design,
    build_sos_design,
    effect_from_fit,
    fit_weighted_ridge,
    gcv_select,
    penalty_matrix,
)
from .stratify import StratumAssignment, doubly_ranked_stratify, residual_stratify, stratify
from .summaries import (
    StratumSummary,
    WeightFunction,
    estimate_weight_function,
    estimate_weight_functions,
    stratum_associations,
    weight_integral_above,
)
from .susie import (
    ChangePointDesign,
    SusieFit,
    build_changepoint_design,
    counterfactual_predict,
    credible_set,
    effect_credible_interval,
    effect_posterior_mean,
    partial_contrast,
    single_effect_regression,
    susie_ibss,
)

__all__ = [
    "IndicatorBasis",
    "PiecewiseLinearBasis",
    "PolynomialBasis",
    "parse_basis",
    "EffectCurve",
    "AnalysisConfig",
    "DataError",
    "Dataset",
    "load_config",
    "load_dataset",
    "write_dataset",
    "QTestResult",
    "q_linearity",
    "q_linearity_decomposition",
    "q_linearity_factorization",
    "DesignMatrix",
    "FitResult",
    "build_sof_design",
    "build_sos_design",
    "effect_from_fit",
    "fit_weighted_ridge",
    "gcv_select",
    "penalty_matrix",
    "StratumAssignment",
    "doubly_ranked_stratify",
    "residual_stratify",
    "stratify",
    "StratumSummary",
    "WeightFunction",
    "estimate_weight_function",
    "estimate_weight_functions",
    "stratum_associations",
    "weight_integral_above",
    "ChangePointDesign",
    "SusieFit",
    "build_changepoint_design",
    "counterfactual_predict",
    "credible_set",
    "effect_credible_interval",
    "effect_posterior_mean",
    "partial_contrast",
    "single_effect_regression",
    "susie_ibss",
    "__version__",
]
