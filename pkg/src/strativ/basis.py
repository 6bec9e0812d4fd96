"""Basis sets for the effect intensity ``h'(x) = sum_l b_l phi_l(x)``.

Every basis knows its values, antiderivatives from 0, inner products with a
stratum weight function (through the stored upper integral ``C``) and its
roughness penalty. Inner products use integration by parts with the
convention that ``C = 1`` left of the weight grid and ``C = 0`` right of it::

    <phi, W> = phi(t_0) + int_{t_0}^{t_N} phi'(x) C(x) dx
"""
from __future__ import annotations

from math import comb
from pathlib import Path
from typing import Sequence

import numpy as np

from .summaries import WeightFunction, weight_integral_above

__all__ = [
    "BasisSet",
    "PolynomialBasis",
    "IndicatorBasis",
    "PiecewiseLinearBasis",
    "parse_basis",
    "difference_penalty",
]


class UnsupportedPenalty(ValueError):
    pass


def difference_penalty(n: int, order: int) -> np.ndarray:
    """``D^T D`` for the ``order``-th difference operator on ``n`` coefficients.

    With ``order >= n`` there is no difference to take and the penalty is zero.
    """
    if order < 0:
        raise UnsupportedPenalty(f"difference order must be >= 0, got {order}")
    if order >= n:
        return np.zeros((n, n))
    D = np.diff(np.eye(n), n=order, axis=0)
    return D.T @ D


def _tail_integral(w: WeightFunction, t: float) -> float:
    """Exact ``int_{max(t, t_0)}^{t_N} C(x) dx`` for piecewise-linear ``C``."""
    g, c = w.grid, w.cum_above
    if t >= g[-1]:
        return 0.0
    seg = np.diff(g) * 0.5 * (c[1:] + c[:-1])
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    if t <= g[0]:
        return float(tail[0])
    i = int(np.searchsorted(g, t, side="right")) - 1
    ct = weight_integral_above(w, t)
    return float(tail[i + 1] + (g[i + 1] - t) * 0.5 * (ct + c[i + 1]))


class BasisSet:
    """Common interface; subclasses fill in the specifics."""

    kind: str = "abstract"

    def __len__(self) -> int:
        return len(self.names)

    @property
    def names(self) -> list[str]:
        raise NotImplementedError

    def evaluate(self, x) -> np.ndarray:
        raise NotImplementedError

    def antiderivative(self, x) -> np.ndarray:
        """``int_0^x phi_l(s) ds`` for each ``l`` (rows follow ``x``)."""
        raise NotImplementedError

    def integral(self, a: float, b: float) -> np.ndarray:
        return self.antiderivative([b])[0] - self.antiderivative([a])[0]

    def weight_inner(self, w: WeightFunction) -> np.ndarray:
        raise NotImplementedError

    def penalty(self, m: int, domain: tuple[float, float]) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class PolynomialBasis(BasisSet):
    """``phi_l(x) = ((x - center) / scale)^l`` for ``l = 0..degree``.

    ``center``/``scale`` give a better-conditioned parameterization;
    :meth:`to_monomial` maps coefficients back to powers of ``x``.
    """

    kind = "polynomial"

    def __init__(self, degree: int, center: float = 0.0, scale: float = 1.0):
        if degree < 0:
            raise ValueError("degree must be >= 0")
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.degree = int(degree)
        self.center = float(center)
        self.scale = float(scale)

    @property
    def names(self):
        return [f"x^{l}" for l in range(self.degree + 1)]

    def _u(self, x):
        return (np.asarray(x, dtype=float) - self.center) / self.scale

    def evaluate(self, x):
        u = self._u(np.atleast_1d(x))
        return u[:, None] ** np.arange(self.degree + 1)

    def derivative(self, x, m: int = 1) -> np.ndarray:
        u = self._u(np.atleast_1d(x))
        out = np.zeros((u.size, self.degree + 1))
        for l in range(m, self.degree + 1):
            fall = np.prod(np.arange(l - m + 1, l + 1, dtype=float))
            out[:, l] = fall * u ** (l - m) / self.scale**m
        return out

    def antiderivative(self, x):
        u = self._u(np.atleast_1d(x))
        u0 = self._u(0.0)
        p = np.arange(1, self.degree + 2)
        return self.scale * (u[:, None] ** p - u0**p) / p

    def weight_inner(self, w):
        g, c = w.grid, w.cum_above
        out = self.evaluate([g[0]])[0].copy()
        if g.size < 2 or self.degree == 0:
            return out
        nodes, wts = np.polynomial.legendre.leggauss(self.degree // 2 + 2)
        a, b = g[:-1, None], g[1:, None]
        xs = 0.5 * (b - a) * nodes + 0.5 * (b + a)
        ws = 0.5 * (b - a) * wts
        cs = np.interp(xs, g, c)
        d = self.derivative(xs.ravel(), 1)
        out += (ws.ravel() * cs.ravel()) @ d
        return out

    def penalty(self, m, domain):
        a, b = map(float, domain)
        if m < 1:
            raise UnsupportedPenalty("derivative order must be >= 1")
        nodes, wts = np.polynomial.legendre.leggauss(self.degree + 2)
        xs = 0.5 * (b - a) * nodes + 0.5 * (b + a)
        d = self.derivative(xs, m)
        R = (d * (0.5 * (b - a) * wts)[:, None]).T @ d
        return 0.5 * (R + R.T)

    def to_monomial(self) -> np.ndarray:
        """Matrix ``T`` with ``monomial_coef = T @ b``."""
        L = self.degree + 1
        T = np.zeros((L, L))
        c, s = self.center, self.scale
        for l in range(L):
            for k in range(l + 1):
                T[k, l] = comb(l, k) * (-c) ** (l - k) / s**l
        return T

    def to_dict(self):
        return {"kind": self.kind, "degree": self.degree, "center": self.center, "scale": self.scale}


class IndicatorBasis(BasisSet):
    """Step functions ``I{x >= t_j}`` (``I{x > t_j}`` when ``strict``), plus a constant.

    The roughness penalty of order ``m`` is the ``(m - 1)``-th difference
    penalty on the jump coefficients.
    """

    kind = "indicator"

    def __init__(self, knots: Sequence[float], intercept: bool = True, strict: bool = False):
        k = np.asarray(knots, dtype=float)
        if k.ndim != 1 or k.size == 0:
            raise ValueError("indicator basis needs at least one knot")
        if np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        self.knots = k
        self.intercept = bool(intercept)
        self.strict = bool(strict)

    @property
    def names(self):
        op = ">" if self.strict else ">="
        return (["1"] if self.intercept else []) + [f"I(x{op}{t:g})" for t in self.knots]

    def evaluate(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
        steps = (x > self.knots) if self.strict else (x >= self.knots)
        cols = steps.astype(float)
        if self.intercept:
            cols = np.column_stack([np.ones(len(x)), cols])
        return cols

    def antiderivative(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
        cols = np.maximum(x - self.knots, 0.0) - np.maximum(-self.knots, 0.0)
        if self.intercept:
            cols = np.column_stack([x[:, 0], cols])
        return cols

    def weight_inner(self, w):
        vals = np.atleast_1d(weight_integral_above(w, self.knots))
        return np.concatenate([[1.0], vals]) if self.intercept else vals

    def penalty(self, m, domain):
        if m < 1:
            raise UnsupportedPenalty("derivative order must be >= 1")
        n = self.knots.size
        R = np.zeros((len(self), len(self)))
        off = int(self.intercept)
        R[off:, off:] = difference_penalty(n, m - 1)
        return R

    def to_dict(self):
        return {"kind": self.kind, "knots": self.knots.tolist(), "intercept": self.intercept,
                "strict": self.strict}


class PiecewiseLinearBasis(BasisSet):
    """``{1, x, (x - t_j)_+}``: continuous piecewise-linear effect intensity.

    ``m = 1`` gives the exact penalty ``int (h'')^2``; ``m >= 2`` uses the
    ``(m - 2)``-th difference penalty on the slope-change coefficients.
    """

    kind = "piecewise_linear_plus"

    def __init__(self, knots: Sequence[float]):
        k = np.asarray(knots, dtype=float)
        if k.ndim != 1:
            raise ValueError("knots must be 1-D")
        if np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        self.knots = k

    @property
    def names(self):
        return ["1", "x"] + [f"(x-{t:g})+" for t in self.knots]

    def evaluate(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.column_stack([np.ones_like(x), x, np.maximum(x[:, None] - self.knots, 0.0)])

    def antiderivative(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        hinge = 0.5 * (np.maximum(x[:, None] - self.knots, 0.0) ** 2 - np.maximum(-self.knots, 0.0) ** 2)
        return np.column_stack([x, 0.5 * x**2, hinge])

    def weight_inner(self, w):
        g0 = w.grid[0]
        out = [1.0, g0 + _tail_integral(w, g0)]
        for t in self.knots:
            out.append(max(g0 - t, 0.0) + _tail_integral(w, t))
        return np.array(out)

    def penalty(self, m, domain):
        a, b = map(float, domain)
        L = len(self)
        R = np.zeros((L, L))
        if m == 1:
            starts = np.concatenate([[a], np.maximum(self.knots, a)])
            for i in range(L - 1):
                for j in range(L - 1):
                    R[i + 1, j + 1] = max(b - max(starts[i], starts[j]), 0.0)
            return R
        if m < 1:
            raise UnsupportedPenalty("derivative order must be >= 1")
        R[2:, 2:] = difference_penalty(self.knots.size, m - 2)
        return R

    def to_dict(self):
        return {"kind": self.kind, "knots": self.knots.tolist()}


def _read_knots(spec: str) -> np.ndarray:
    path = Path(spec)
    if path.is_file():
        text = path.read_text().replace(",", " ").split()
        vals = []
        for tok in text:
            try:
                vals.append(float(tok))
            except ValueError:
                continue  # header words
        return np.array(sorted(vals))
    return np.array(sorted(float(v) for v in spec.split(",") if v.strip()))


def parse_basis(spec: str, center: float = 0.0, scale: float = 1.0) -> BasisSet:
    """Parse ``poly:d``, ``indicator:<knotfile|t1,t2>`` or ``pwl:<knotfile|t1,t2>``.

    ``indicator-strict:`` uses ``I{x > t}`` steps.
    """
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    if kind in ("poly", "polynomial"):
        return PolynomialBasis(int(arg), center=center, scale=scale)
    if kind == "indicator":
        return IndicatorBasis(_read_knots(arg))
    if kind == "indicator-strict":
        return IndicatorBasis(_read_knots(arg), strict=True)
    if kind in ("pwl", "piecewise_linear_plus"):
        return PiecewiseLinearBasis(_read_knots(arg))
    raise ValueError(f"unknown basis spec {spec!r}")


def basis_from_dict(d: dict) -> BasisSet:
    kind = d["kind"]
    if kind == "polynomial":
        return PolynomialBasis(d["degree"], d.get("center", 0.0), d.get("scale", 1.0))
    if kind == "indicator":
        return IndicatorBasis(d["knots"], d.get("intercept", True), d.get("strict", False))
    if kind == "piecewise_linear_plus":
        return PiecewiseLinearBasis(d["knots"])
    raise ValueError(f"unknown basis kind {kind!r}")
