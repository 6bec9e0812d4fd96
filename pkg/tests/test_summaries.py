import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from strativ.data import Dataset
from strativ.stratify import StratumAssignment, doubly_ranked_stratify
from strativ.summaries import (
    StratumError,
    WeakStratumWarning,
    WeightFunction,
    default_grid,
    estimate_weight_function,
    estimate_weight_functions,
    slope_cov,
    stratum_associations,
    wald_se,
    weight_integral_above,
)


def one_stratum(z, x, y):
    d = Dataset(z, x, y)
    return d, StratumAssignment(np.ones(d.n, dtype=int), 1, "doubly_ranked")


def test_noiseless_stratum():
    z = np.arange(10.0)
    d, a = one_stratum(z, z, 2 * z)
    (s,) = stratum_associations(d, a)
    assert s.alpha_hat == pytest.approx(1.0, abs=1e-14)
    assert s.theta_hat == pytest.approx(2.0, abs=1e-14)
    assert s.beta_hat == pytest.approx(2.0, abs=1e-14)


def test_constant_instrument_is_an_error():
    d, a = one_stratum(np.ones(10), np.arange(10.0), np.arange(10.0))
    with pytest.raises(StratumError):
        stratum_associations(d, a)


def test_wald_estimate_within_three_se_over_seeds():
    hits = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(500)
        x = 0.5 * z + rng.standard_normal(500)
        y = x + rng.standard_normal(500)
        d, a = one_stratum(z, x, y)
        (s,) = stratum_associations(d, a, weak_threshold=0.0)
        hits += abs(s.beta_hat - 1.0) <= 3 * s.se_beta
    assert hits >= 990


@pytest.mark.parametrize("args, expected", [
    ((1.0, 0.0, 3.0, 0.2, "first"), 0.2),
    ((2.0, 0.0, 3.0, 0.2, "second"), 0.1),
    ((2.0, 0.1, 4.0, 0.2, "second"), np.sqrt(0.02)),
])
def test_wald_se_examples(args, expected):
    assert wald_se(*args) == pytest.approx(expected, rel=1e-12)


def test_wald_se_zero_alpha():
    with pytest.raises(ZeroDivisionError):
        wald_se(0.0, 0.1, 1.0, 0.1)


def test_slope_cov_matches_bivariate_regression():
    rng = np.random.default_rng(5)
    z = rng.standard_normal(50)
    u = z + rng.standard_normal(50)
    v = u + rng.standard_normal(50)
    # stacked regression oracle: Cov(b_u, b_v) = s_uv / sum (z - zbar)^2
    A = np.column_stack([np.ones(50), z])
    ru = u - A @ np.linalg.lstsq(A, u, rcond=None)[0]
    rv = v - A @ np.linalg.lstsq(A, v, rcond=None)[0]
    expected = (ru @ rv) / 48 * np.linalg.inv(A.T @ A)[1, 1]
    assert slope_cov(z, u, v) == pytest.approx(expected, rel=1e-10)


def test_weak_strata_warn_and_sort_by_exposure():
    rng = np.random.default_rng(3)
    n = 2000
    z = rng.standard_normal(n)
    x = 0.02 * z + rng.standard_normal(n)
    d = Dataset(z, x, x)
    a = doubly_ranked_stratify(d, 4)
    with pytest.warns(WeakStratumWarning):
        out = stratum_associations(d, a)
    assert any(s.weak for s in out)
    assert [s.x_bar for s in out] == sorted(s.x_bar for s in out)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 5))
def test_wald_identity_and_normalization(seed, K):
    rng = np.random.default_rng(seed)
    n = 60 * K
    z = rng.standard_normal(n)
    x = 0.8 * z + rng.standard_normal(n)
    d = Dataset(z, x, x**2 + rng.standard_normal(n))
    a = doubly_ranked_stratify(d, K)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WeakStratumWarning)
        summ = stratum_associations(d, a)
    for s in summ:
        assert s.beta_hat * s.alpha_hat == pytest.approx(s.theta_hat, rel=1e-12, abs=1e-15)
        assert s.se_alpha >= 0 and s.se_theta >= 0 and s.se_beta > 0
    for w in estimate_weight_functions(d, a, default_grid(d.x, 50)):
        idx = a.members(w.stratum)
        assert abs(weight_integral_above(w, d.x[idx].min()) - 1.0) <= 1e-12
        assert np.all(np.isfinite(w.cum_above))


def test_weight_function_limits():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(300)
    x = z + rng.standard_normal(300)
    d, a = one_stratum(z, x, x)
    grid = np.array([x.min() - 1, 0.0, x.max(), x.max() + 1])
    w = estimate_weight_function(d, a, 1, grid)
    c = weight_integral_above(w, grid)
    assert c[0] == 1.0 and weight_integral_above(w, x.min()) == 1.0
    assert c[2] == 0.0 and c[3] == 0.0
    assert x.min() in w.grid and x.max() in w.grid


def test_weight_function_zero_covariance():
    z = np.array([1.0, -1.0, 1.0, -1.0])
    x = np.array([1.0, 1.0, 2.0, 2.0])
    d, a = one_stratum(z, x, x)
    with pytest.raises(StratumError):
        estimate_weight_function(d, a, 1, [0.0, 1.5, 3.0])


def test_gaussian_upper_tail():
    rng = np.random.default_rng(11)
    n = 50_000
    z = rng.standard_normal(n)
    x = 0.5 * z + rng.standard_normal(n)
    d, a = one_stratum(z, x, x)
    grid = default_grid(x, 100)
    w = estimate_weight_function(d, a, 1, grid)
    tail = stats.norm.sf(w.grid, scale=np.sqrt(1.25))
    assert np.max(np.abs(w.cum_above - tail)) < 0.05


def test_gaussian_limit_sharpens_with_n():
    dist = []
    for n in (2_000, 200_000):
        rng = np.random.default_rng(4)
        z = rng.standard_normal(n)
        x = 0.5 * z + rng.standard_normal(n)
        d, a = one_stratum(z, x, x)
        grid = np.linspace(-2.5, 2.5, 41)
        w = estimate_weight_function(d, a, 1, grid)
        c = weight_integral_above(w, grid)
        dist.append(np.max(np.abs(c - stats.norm.sf(grid, scale=np.sqrt(1.25)))))
    assert dist[1] < dist[0]


def test_weights_non_negative_under_monotone_instrument():
    rng = np.random.default_rng(8)
    n = 100_000
    z = rng.standard_normal(n)
    x = 0.7 * z + rng.standard_normal(n)
    d, a = one_stratum(z, x, x)
    w = estimate_weight_function(d, a, 1, np.linspace(-3, 3, 25))
    _, dens = w.density()
    assert dens.min() > -0.02


def test_interpolation_and_clamping():
    w = WeightFunction(1, np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.6, 0.4]), 0.0, 2.0)
    assert weight_integral_above(w, 0.0) == 1.0
    assert weight_integral_above(w, 1.5) == pytest.approx(0.5, abs=1e-15)
    assert weight_integral_above(w, 1.0) == 0.6
    assert weight_integral_above(w, -5.0) == 1.0
    assert weight_integral_above(w, 9.0) == 0.0
    w2 = WeightFunction(1, np.array([0.0, 1.0]), np.array([1.0, 0.0]), 0.0, 1.0)
    assert weight_integral_above(w2, 1.0) == 0.0


def test_weight_function_validation():
    with pytest.raises(ValueError):
        WeightFunction(1, np.array([0.0, 0.0]), np.array([1.0, 0.0]), 0, 1)
    with pytest.raises(ValueError):
        WeightFunction(1, np.array([0.0, 1.0]), np.array([1.0, np.nan]), 0, 1)
