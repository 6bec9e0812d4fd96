"""Synthetic data generators and seeded replication studies.

Every scenario uses ``U, e_X, e_Y ~ N(0, 1)`` and::

    X = g(a Z + U + e_X)            g = identity or exp
    Y = h(X) + confounding + e_Y    confounding = U, or |U| + e_X^2 + 2|U||e_X|

with ``h`` anchored so that ``h(0) = 0``.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from .basis import IndicatorBasis, PolynomialBasis
from .data import AnalysisConfig, Dataset
from .linearity import q_linearity
from .pipeline import run_changepoint, run_parametric, stage_one
from .susie import changepoint_location

__all__ = [
    "Effect",
    "ScenarioSpec",
    "StudyResult",
    "scenario",
    "SCENARIOS",
    "generate",
    "true_effect",
    "theoretical_quantiles",
    "run_study",
    "METHODS",
]

DEFAULT_QUANTILES = (0.1, 0.3, 0.5, 0.7, 0.9)


# --- effect functions ---------------------------------------------------------

@dataclass(frozen=True)
class Effect:
    """Closed-form effect ``h`` and intensity ``h'``.

    ``kind`` is one of ``linear``, ``piecewise_linear``, ``quadratic``,
    ``indicator_step`` or ``exponential``. For ``piecewise_linear``
    ``h(x) = slope*x + sum_j w_j (x - t_j)_+ + offset``.
    """

    kind: str
    slope: float = 1.0
    knots: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()
    offset: float = 0.0
    quad: float = 0.0
    rate: float = 0.5
    threshold: float = 0.0
    label: str = ""

    def h(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return self.slope * x
        if self.kind == "piecewise_linear":
            out = self.slope * x + self.offset
            for t, w in zip(self.knots, self.weights):
                out = out + w * np.maximum(x - t, 0.0)
            return out
        if self.kind == "quadratic":
            return self.slope * x + self.quad * x**2
        if self.kind == "indicator_step":
            return (x > self.threshold).astype(float) - float(0.0 > self.threshold)
        if self.kind == "exponential":
            return np.exp(self.rate * x) - 1.0
        raise ValueError(f"unknown effect kind {self.kind!r}")

    def h_prime(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return np.full_like(x, self.slope)
        if self.kind == "piecewise_linear":
            out = np.full_like(x, self.slope)
            for t, w in zip(self.knots, self.weights):
                out = out + w * (x > t)
            return out
        if self.kind == "quadratic":
            return self.slope + 2 * self.quad * x
        if self.kind == "indicator_step":
            # a point mass at the threshold; zero elsewhere
            return np.zeros_like(x)
        if self.kind == "exponential":
            return self.rate * np.exp(self.rate * x)
        raise ValueError(f"unknown effect kind {self.kind!r}")


def _hinge(t: float, label: str = "") -> Effect:
    return Effect("piecewise_linear", slope=0.0, knots=(t,), weights=(1.0,), label=label)


# --- scenarios ----------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    instrument: str = "bernoulli_centered"
    instrument_effect: float = 0.15
    exposure_link: str = "identity"
    confounding: str = "simple"
    effect: Effect = Effect("linear")
    name: str = "custom"

    def __post_init__(self):
        if self.instrument not in ("bernoulli_centered", "standard_normal"):
            raise ValueError(f"unknown instrument law {self.instrument!r}")
        if self.exposure_link not in ("identity", "exp"):
            raise ValueError(f"unknown exposure link {self.exposure_link!r}")
        if self.confounding not in ("simple", "complex"):
            raise ValueError(f"unknown confounding {self.confounding!r}")
        if not math.isfinite(self.instrument_effect):
            raise ValueError("instrument_effect must be finite")

    def to_dict(self) -> dict:
        e = self.effect
        return {
            "name": self.name,
            "instrument": self.instrument,
            "instrument_effect": self.instrument_effect,
            "exposure_link": self.exposure_link,
            "confounding": self.confounding,
            "effect": {k: (list(v) if isinstance(v, tuple) else v) for k, v in e.__dict__.items()},
        }


def _shape_case(case: int, lognormal: bool) -> Effect:
    if case == 1:
        return Effect("linear", label="case1")
    if case == 2:
        return _hinge(2.5 if lognormal else 0.0, "case2")
    if case == 3:
        if lognormal:
            return Effect("piecewise_linear", slope=0.5, knots=(0.5, 2.5), weights=(0.5, 0.5),
                          label="case3")
        return Effect("piecewise_linear", slope=0.5, knots=(-0.5, 0.5), weights=(0.5, 0.5),
                      offset=-0.25, label="case3")
    if case == 4:
        return Effect("quadratic", slope=-2.0 if lognormal else -1.0, quad=0.5, label="case4")
    raise ValueError(f"case must be 1..4, got {case}")


def _instrument(s: int) -> str:
    return "bernoulli_centered" if s in (1, 2) else "standard_normal"


def scenario(name: str, case: int | None = None) -> ScenarioSpec:
    """Named preset.

    ``linear-s{1..4}``: linear effect, binary/continuous instrument crossed
    with simple/complex confounding. ``binary-quadratic`` and ``binary-step``:
    binary instrument with ``h' = 1 + 2x`` or ``h' = I{x > 0}``.
    ``shape-s{1..4}`` with ``case`` 1..4: normal (s1, s2) or lognormal
    (s3, s4) exposure. ``step-s{1..4}`` and ``exp-s{1..4}``: the
    ``linear-s`` layout with ``h = I{x > 0}`` or ``h = exp(x/2) - 1``.
    ``tutorial``: continuous instrument with a planted threshold at 0.5.
    """
    key = name.lower()
    if key.startswith("linear-s"):
        s = int(key[-1])
        return ScenarioSpec(_instrument(s), 0.15, "identity",
                            "simple" if s in (1, 3) else "complex", Effect("linear"), key)
    if key == "binary-quadratic":
        return ScenarioSpec(effect=Effect("quadratic", slope=1.0, quad=0.5), name=key)
    if key == "binary-step":
        return ScenarioSpec(effect=_hinge(0.0), name=key)
    if key.startswith("shape-s"):
        s = int(key[-1])
        if case is None:
            raise ValueError("shape scenarios need a case (1..4)")
        lognormal = s in (3, 4)
        return ScenarioSpec(
            "bernoulli_centered" if s in (1, 3) else "standard_normal",
            0.3 if lognormal else 0.15,
            "exp" if lognormal else "identity",
            "simple",
            _shape_case(case, lognormal),
            f"{key}-case{case}",
        )
    for prefix, eff in (("step-s", Effect("indicator_step")),
                        ("exp-s", Effect("exponential", rate=0.5))):
        if key.startswith(prefix):
            s = int(key[-1])
            return ScenarioSpec(_instrument(s), 0.15, "identity",
                                "simple" if s in (1, 3) else "complex", eff, key)
    if key == "tutorial":
        return ScenarioSpec("standard_normal", 0.3, "identity", "simple", _hinge(0.5), key)
    raise ValueError(f"unknown scenario {name!r}")


SCENARIOS = (
    [f"linear-s{i}" for i in range(1, 5)]
    + ["binary-quadratic", "binary-step"]
    + [f"shape-s{i}" for i in range(1, 5)]
    + [f"step-s{i}" for i in range(1, 5)]
    + [f"exp-s{i}" for i in range(1, 5)]
    + ["tutorial"]
)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def generate(spec: ScenarioSpec, n: int, seed=0) -> tuple[Dataset, Effect]:
    """Draw ``n`` i.i.d. individuals; returns the data and the true effect."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed)
    if spec.instrument == "bernoulli_centered":
        z = rng.integers(0, 2, size=n).astype(float) - 0.5
    else:
        z = rng.standard_normal(n)
    u = rng.standard_normal(n)
    ex = rng.standard_normal(n)
    ey = rng.standard_normal(n)
    latent = spec.instrument_effect * z + u + ex
    x = np.exp(latent) if spec.exposure_link == "exp" else latent
    if spec.confounding == "simple":
        conf = u
    else:
        conf = np.abs(u) + ex**2 + 2 * np.abs(u) * np.abs(ex)
    y = spec.effect.h(x) + conf + ey
    return Dataset(z, x, y), spec.effect


def true_effect(spec: ScenarioSpec, x) -> tuple:
    h, hp = spec.effect.h(x), spec.effect.h_prime(x)
    if np.ndim(h) == 0:
        return float(h), float(hp)
    return h, hp


def _latent_cdf(spec: ScenarioSpec, v):
    sd = math.sqrt(2.0)
    a = spec.instrument_effect
    if spec.instrument == "standard_normal":
        return stats.norm.cdf(v, scale=math.sqrt(a * a + 2.0))
    return 0.5 * (stats.norm.cdf(v, loc=-a / 2, scale=sd) + stats.norm.cdf(v, loc=a / 2, scale=sd))


def theoretical_quantiles(spec: ScenarioSpec, probs: Sequence[float]) -> np.ndarray:
    """Exposure quantiles from the exact marginal law (a mixture over ``Z``).

    The latent ``a Z + U + e_X`` is symmetric about 0, so its median is 0
    exactly; the exponential link maps quantiles monotonically.
    """
    out = []
    for p in probs:
        if not 0 < p < 1:
            raise ValueError("quantile probabilities must lie in (0, 1)")
        if p == 0.5:
            v = 0.0
        else:
            v = optimize.brentq(lambda t: _latent_cdf(spec, t) - p, -50.0, 50.0, xtol=1e-14,
                                rtol=4 * np.finfo(float).eps)
        out.append(math.exp(v) if spec.exposure_link == "exp" else v)
    return np.array(out)


# --- estimation methods -------------------------------------------------------

@dataclass(frozen=True)
class MethodOutput:
    estimates: np.ndarray
    coefficients: tuple[float, ...] = ()
    changepoint_mode: float | None = None
    changepoint_mean: float | None = None
    l_star: int | None = None
    p_value: float | None = None


def _ols(cols, y):
    A = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def _method_m1(data, x_eval, spec, opts):
    r = data.x - np.column_stack([np.ones(data.n), data.z]) @ _ols([np.ones(data.n), data.z], data.x)
    c = _ols([np.ones(data.n), data.x, data.x**2, r], data.y)
    b1, b2 = float(c[1]), float(c[2])
    return MethodOutput(b1 * x_eval + b2 * x_eval**2, (b1, b2))


def _method_m2(data, x_eval, spec, opts):
    if spec.instrument == "bernoulli_centered":
        g1 = data.z > 0
    else:
        g1 = data.z > np.median(data.z)
    A = np.empty((2, 2))
    rhs = np.empty(2)
    for row, mask in enumerate((~g1, g1)):
        A[row] = [data.x[mask].mean(), (data.x[mask] ** 2).mean()]
        rhs[row] = data.y[mask].mean()
    b1, b2 = np.linalg.solve(A, rhs)
    return MethodOutput(b1 * x_eval + b2 * x_eval**2, (float(b1), float(b2)))


def _config(opts, **defaults) -> AnalysisConfig:
    merged = {**defaults, **{k: v for k, v in opts.items() if k in AnalysisConfig.__dataclass_fields__}}
    return AnalysisConfig(**merged)


def _method_m3(data, x_eval, spec, opts):
    cfg = _config(opts, strata_count=100, se_order="first")
    res = run_parametric(data, cfg, PolynomialBasis(1), "sos", lam=0.0, curve_grid=x_eval, quiet=True)
    b1, b2 = (float(v) for v in res.fit.b_hat)
    # h'(x) = b1 + b2 x  ->  h(x) = b1 x + (b2 / 2) x^2
    return MethodOutput(res.curve.h, (b1, b2 / 2))


def _oracle_basis(spec: ScenarioSpec):
    e = spec.effect
    if e.kind in ("linear", "quadratic"):
        return PolynomialBasis(1)
    if e.kind == "piecewise_linear" and len(e.knots) == 1:
        return IndicatorBasis(list(e.knots), strict=True)
    raise ValueError(f"no oracle basis for effect kind {e.kind!r}")


def _method_parametric(mode):
    def run(data, x_eval, spec, opts):
        cfg = _config(opts, strata_count=10, se_order="first")
        res = run_parametric(data, cfg, _oracle_basis(spec), mode, lam=0.0, curve_grid=x_eval,
                             quiet=True)
        return MethodOutput(res.curve.h_prime, tuple(float(v) for v in res.fit.b_hat))
    return run


def _method_sss(data, x_eval, spec, opts):
    cfg = _config(opts, strata_count=100, se_order="first", max_effects=10)
    res = run_changepoint(data, cfg, curve_grid=x_eval, band=False, quiet=True)
    fit = res.fit
    mode = mean = None
    if fit.detected:
        loc, _ = changepoint_location(fit.pi_star[fit.detected[0]], res.design.knots)
        mode, mean = loc.mode, loc.mean
    return MethodOutput(res.curve.h, (), mode, mean, fit.l_star)


def _method_qtest(data, x_eval, spec, opts):
    cfg = _config(opts, strata_count=10, se_order="second")
    stage = stage_one(data, cfg, with_weights=False, quiet=True)
    res = q_linearity(stage.summaries, correlated=opts.get("correlated", True))
    return MethodOutput(np.full(len(x_eval), np.nan), (res.estimates["beta"],), p_value=res.p_value)


METHODS: dict[str, Callable] = {
    "m1": _method_m1,
    "m2": _method_m2,
    "m3": _method_m3,
    "sos": _method_parametric("sos"),
    "sof": _method_parametric("sof"),
    "sss": _method_sss,
    "m5": _method_sss,
    "qtest": _method_qtest,
}

# which curve each method estimates
_TARGET = {"sos": "h_prime", "sof": "h_prime", "qtest": "none"}


# --- studies ------------------------------------------------------------------

@dataclass
class StudyResult:
    scenario: dict
    method: str
    target: str
    n: int
    reps: int
    master_seed: int
    quantiles: list
    x_eval: list
    truth: list
    estimates: list  # reps x quantiles, None for failed replications
    mse: list
    failures: list = field(default_factory=list)
    coefficients: list = field(default_factory=list)
    changepoint_mode: list = field(default_factory=list)
    changepoint_mean: list = field(default_factory=list)
    l_star: list = field(default_factory=list)
    p_values: list = field(default_factory=list)
    options: dict = field(default_factory=dict)

    @property
    def failure_count(self) -> int:
        return len(self.failures)

    def rejection_rate(self, alpha: float = 0.05) -> float | None:
        p = [v for v in self.p_values if v is not None]
        return float(np.mean(np.array(p) < alpha)) if p else None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["failure_count"] = self.failure_count
        d["rejection_rate_5pct"] = self.rejection_rate(0.05)
        return d

    def mse_rows(self) -> list[dict]:
        return [{"quantile": q, "x": x, "truth": t, "mse": m}
                for q, x, t, m in zip(self.quantiles, self.x_eval, self.truth, self.mse)]


def replication_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(index)])


def _one_rep(args):
    spec, method, n, x_eval, master, i, opts = args
    rng = np.random.default_rng(replication_seed(master, i))
    try:
        data, _ = generate(spec, n, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return i, METHODS[method](data, x_eval, spec, opts), None
    except Exception as exc:  # recorded per replication, the study carries on
        return i, None, f"{type(exc).__name__}: {exc}"


def run_study(spec: ScenarioSpec, method: str, n: int, reps: int,
              eval_quantiles: Sequence[float] = DEFAULT_QUANTILES, seed: int = 0,
              workers: int | None = 1, **options) -> StudyResult:
    """Replicate generate-then-estimate ``reps`` times and summarize the MSE.

    Replication ``i`` draws from ``SeedSequence([seed, i])``, so results do
    not depend on ``workers``. Extra keyword ``options`` override the
    method's analysis settings (``strata_count``, ``se_order``, ...).
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    x_eval = theoretical_quantiles(spec, eval_quantiles)
    target = _TARGET.get(method, "h")
    h, hp = spec.effect.h(x_eval), spec.effect.h_prime(x_eval)
    truth = hp if target == "h_prime" else h
    jobs = [(spec, method, n, x_eval, seed, i, options) for i in range(reps)]
    workers = workers or int(os.environ.get("STRATIV_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_rep, jobs, chunksize=max(1, reps // (4 * workers))))
    else:
        results = [_one_rep(j) for j in jobs]
    results.sort(key=lambda r: r[0])

    est_rows, failures = [], []
    res = StudyResult(spec.to_dict(), method, target, n, reps, seed, list(eval_quantiles),
                      x_eval.tolist(), np.asarray(truth, dtype=float).tolist(), [], [],
                      options=dict(options))
    for i, out, err in results:
        if out is None:
            failures.append({"replication": i, "error": err})
            res.estimates.append(None)
            for lst in (res.coefficients, res.changepoint_mode, res.changepoint_mean, res.l_star,
                        res.p_values):
                lst.append(None)
            continue
        est_rows.append(out.estimates)
        res.estimates.append(np.asarray(out.estimates, dtype=float).tolist())
        res.coefficients.append(list(out.coefficients))
        res.changepoint_mode.append(out.changepoint_mode)
        res.changepoint_mean.append(out.changepoint_mean)
        res.l_star.append(out.l_star)
        res.p_values.append(out.p_value)
    res.failures = failures
    if est_rows and target != "none":
        err = np.asarray(est_rows, dtype=float) - np.asarray(truth, dtype=float)
        res.mse = np.mean(err**2, axis=0).tolist()
    else:
        res.mse = [None] * len(x_eval)
    return res
