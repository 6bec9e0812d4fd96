"""Effect curves: the user-facing pointwise result of every fitting route."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["EffectCurve"]


@dataclass(frozen=True)
class EffectCurve:
    """Pointwise ``h(x)`` (anchored at ``h(0) = 0``) and optionally ``h'(x)``.

    Band arrays may be ``None`` when only point estimates are available.
    ``provenance`` is ``"susie_posterior"`` or ``"parametric_frequentist"``.
    """

    x_grid: np.ndarray
    h: np.ndarray
    provenance: str
    h_lo: np.ndarray | None = None
    h_hi: np.ndarray | None = None
    h_prime: np.ndarray | None = None
    h_prime_lo: np.ndarray | None = None
    h_prime_hi: np.ndarray | None = None
    level: float | None = None

    def columns(self) -> dict[str, np.ndarray]:
        cols = {"x": self.x_grid, "h": self.h}
        for name in ("h_lo", "h_hi", "h_prime", "h_prime_lo", "h_prime_hi"):
            v = getattr(self, name)
            if v is not None:
                cols[name] = v
        return cols

    def to_csv(self, path) -> None:
        cols = self.columns()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(cols))
            for row in zip(*(np.asarray(c).tolist() for c in cols.values())):
                w.writerow([repr(v) for v in row])

    def at(self, x: float) -> float:
        return float(np.interp(x, self.x_grid, self.h))
