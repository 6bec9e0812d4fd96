"""Residual and doubly-ranked stratification on the counterfactual exposure.

All ranking steps are stable sorts with ties broken by original row index,
so assignments are a deterministic function of the data.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import AnalysisConfig, DataError, Dataset

__all__ = [
    "EXCLUDED",
    "StratumAssignment",
    "ExposureModelSpec",
    "residual_stratify",
    "doubly_ranked_stratify",
    "stratify",
    "INSTRUMENT_TERMS",
]

EXCLUDED = 0


@dataclass(frozen=True)
class StratumAssignment:
    """Per-individual stratum labels ``1..K``; ``EXCLUDED`` (0) marks leftovers."""

    labels: np.ndarray
    K: int
    method: str

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if labels.min(initial=0) < 0 or labels.max(initial=0) > self.K:
            raise ValueError("stratum labels must lie in 0..K")

    @property
    def excluded_count(self) -> int:
        return int(np.count_nonzero(self.labels == EXCLUDED))

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K + 1)[1:]

    def members(self, k: int) -> np.ndarray:
        """Row indices (0-based, ascending) of stratum ``k`` (1-based)."""
        return np.flatnonzero(self.labels == k)


# Basis terms for the instrument-exposure curve f(z).
INSTRUMENT_TERMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "1": np.ones_like,
    "z": lambda z: z,
    "z2": lambda z: z**2,
    "z3": lambda z: z**3,
    "abs_z": np.abs,
}

_TRANSFORMS = {
    "identity": lambda x: x,
    "log": np.log,
}


@dataclass(frozen=True)
class ExposureModelSpec:
    """Structural exposure model ``t^{-1}(X) = f(Z) + error``.

    ``transform`` names the inverse link applied to the exposure before
    fitting (``"log"`` for multiplicative instrument effects).
    ``candidate_terms`` are keys of :data:`INSTRUMENT_TERMS`.
    """

    transform: str = "identity"
    candidate_terms: tuple[str, ...] = ("1", "z")
    selection: str = "fixed"

    def __post_init__(self):
        if self.transform not in _TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        if not self.candidate_terms:
            raise ValueError("candidate_terms must be non-empty")
        unknown = [t for t in self.candidate_terms if t not in INSTRUMENT_TERMS]
        if unknown:
            raise ValueError(f"unknown instrument terms {unknown}")
        if self.selection not in ("fixed", "bic"):
            raise ValueError("selection must be 'fixed' or 'bic'")


def _rss(design: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    return float(resid @ resid), resid


def _bic(rss: float, n: int, k: int) -> float:
    return n * np.log(max(rss, np.finfo(float).tiny) / n) + k * np.log(n)


def _select_terms(columns: dict[str, np.ndarray], target: np.ndarray) -> tuple[str, ...]:
    names = list(columns)
    n = len(target)

    def score(subset):
        rss, _ = _rss(np.column_stack([columns[s] for s in subset]), target)
        return _bic(rss, n, len(subset))

    if len(names) <= 10:
        best, best_score = None, np.inf
        for r in range(1, len(names) + 1):
            for subset in itertools.combinations(names, r):
                s = score(subset)
                if s < best_score:
                    best, best_score = subset, s
        return best

    # forward stepwise
    chosen: list[str] = []
    best_score = np.inf
    while True:
        cands = [(score(chosen + [nm]), nm) for nm in names if nm not in chosen]
        if not cands:
            break
        s, nm = min(cands)
        if s >= best_score:
            break
        chosen.append(nm)
        best_score = s
    return tuple(chosen)


def exposure_residuals(data: Dataset, model: ExposureModelSpec = ExposureModelSpec()) -> np.ndarray:
    """Residuals ``t^{-1}(x) - f_hat(z)`` of the fitted exposure model."""
    if np.ptp(data.z) == 0:
        raise DataError("instrument has zero variance")
    if model.transform == "log" and np.any(data.x <= 0):
        raise DataError("log transform requires strictly positive exposure")
    target = _TRANSFORMS[model.transform](data.x)
    columns = {t: np.asarray(INSTRUMENT_TERMS[t](data.z), dtype=float) for t in model.candidate_terms}
    terms = model.candidate_terms
    if model.selection == "bic":
        terms = _select_terms(columns, target)
    _, resid = _rss(np.column_stack([columns[t] for t in terms]), target)
    # exact fits leave rounding noise; treat it as a tie so index order decides
    scale = float(np.max(np.abs(target))) or 1.0
    resid[np.abs(resid) <= 1e-12 * scale] = 0.0
    return resid


def residual_stratify(data: Dataset, K: int, model: ExposureModelSpec = ExposureModelSpec()) -> StratumAssignment:
    """Rank individuals on exposure-model residuals and cut into ``K`` equal strata.

    The ``n - K * (n // K)`` highest-ranked individuals are excluded.
    """
    n = data.n
    if not 1 < K <= n:
        raise DataError(f"need 1 < K <= n, got K={K}, n={n}")
    resid = exposure_residuals(data, model)
    order = np.argsort(resid, kind="stable")
    m = n // K
    labels = np.zeros(n, dtype=np.int64)
    labels[order[: K * m]] = np.repeat(np.arange(1, K + 1), m)
    return StratumAssignment(labels, K, "residual")


def doubly_ranked_stratify(data: Dataset, K: int, S: int | None = None) -> StratumAssignment:
    """Rank on the instrument into pre-strata of size ``S``, then on exposure within each.

    Stratum ``k`` collects, from every pre-stratum, the individuals whose
    within-pre-stratum exposure rank falls in block ``k`` of size ``S / K``.
    Individuals beyond the last complete pre-stratum are excluded.
    """
    n = data.n
    S = K if S is None else S
    if K < 2:
        raise DataError("K must be at least 2")
    if S < K or S % K:
        raise DataError(f"S={S} is not a positive multiple of K={K}")
    if S > n:
        raise DataError(f"S={S} exceeds sample size {n}")
    n_pre = n // S
    by_z = np.argsort(data.z, kind="stable")
    blocks = by_z[: n_pre * S].reshape(n_pre, S)
    # within each pre-stratum: sort by x, ties by original index
    key_x = data.x[blocks]
    within = np.lexsort((blocks, key_x), axis=1)
    ranked = np.take_along_axis(blocks, within, axis=1)
    per_rank = np.repeat(np.arange(1, K + 1), S // K)
    labels = np.zeros(n, dtype=np.int64)
    labels[ranked] = per_rank[np.newaxis, :]
    return StratumAssignment(labels, K, "doubly_ranked")


def stratify(data: Dataset, config: AnalysisConfig) -> StratumAssignment:
    config.check_sample_size(data.n)
    if config.stratifier == "residual":
        model = ExposureModelSpec(config.exposure_transform, tuple(config.exposure_terms),
                                  config.exposure_selection)
        return residual_stratify(data, config.strata_count, model)
    return doubly_ranked_stratify(data, config.strata_count, config.S)


def stratum_table(data: Dataset, assignment: StratumAssignment) -> list[dict]:
    """Size, exposure mean and instrument mean of each stratum."""
    rows = []
    for k in range(1, assignment.K + 1):
        idx = assignment.members(k)
        rows.append({
            "stratum": k,
            "size": int(idx.size),
            "x_mean": float(data.x[idx].mean()) if idx.size else float("nan"),
            "z_mean": float(data.z[idx].mean()) if idx.size else float("nan"),
        })
    return rows
