import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats

from conftest import make_summaries
from strativ.linearity import (
    q_linearity,
    q_linearity_decomposition,
    q_linearity_factorization,
    q_statistic,
    q_test,
)

K3 = dict(theta=[0.30, 0.55, 1.10], alpha=[0.20, 0.30, 0.45],
          se_theta=[0.05, 0.06, 0.08], se_alpha=[0.02, 0.025, 0.03])
K5 = dict(theta=[0.12, 0.31, 0.35, 0.62, 0.70], alpha=[0.10, 0.18, 0.22, 0.30, 0.36],
          se_theta=[0.04, 0.05, 0.05, 0.06, 0.07], se_alpha=[0.01, 0.015, 0.02, 0.02, 0.025])
K6 = dict(theta=[0.10, 0.25, 0.41, 0.50, 0.72, 0.80], alpha=[0.10, 0.16, 0.24, 0.28, 0.37, 0.42],
          se_theta=[0.04, 0.05, 0.05, 0.06, 0.06, 0.07],
          se_alpha=[0.01, 0.012, 0.015, 0.018, 0.02, 0.022],
          gamma=[0.02, -0.05, 0.08, 0.01, 0.12, 0.04],
          se_gamma=[0.03, 0.03, 0.035, 0.04, 0.04, 0.045])


def test_homogeneous_ratios():
    s = make_summaries([0.2, 0.4, 0.6], [0.1, 0.2, 0.3], [0.05] * 3, [0.0] * 3)
    r = q_linearity(s)
    assert r.q == pytest.approx(0.0, abs=1e-18) and r.p_value == pytest.approx(1.0)
    assert r.estimates["beta"] == pytest.approx(2.0, rel=1e-10)


def test_df_per_variant():
    assert q_linearity(make_summaries([1, 2], [1, 1], [0.1, 0.1], [0, 0])).df == 1
    assert q_linearity_decomposition(make_summaries(**{k: v[:3] for k, v in K3.items()})).df == 1
    s4 = make_summaries(**{k: v[:4] for k, v in K6.items()})
    assert q_linearity_factorization(s4).df == 1


def test_standard_against_grid_search():
    r = q_linearity(make_summaries(**K3))
    th, al, st_, sa = (np.array(K3[k]) for k in ("theta", "alpha", "se_theta", "se_alpha"))
    b = np.arange(-10, 10 + 5e-6, 1e-5)
    Q = sum((th[i] - b * al[i]) ** 2 / (st_[i] ** 2 + b**2 * sa[i] ** 2) for i in range(3))
    grid_min = float(Q.min())
    assert grid_min == pytest.approx(6.654796107383117, rel=1e-12)  # frozen oracle value
    assert r.q <= grid_min + 1e-12
    assert r.q == pytest.approx(grid_min, rel=1e-7)
    assert r.p_value == pytest.approx(stats.chi2.sf(r.q, 2), rel=1e-12)


def test_decomposition_against_profile_oracle():
    s = make_summaries(**K5)
    r = q_linearity_decomposition(s)
    th, al, st_, sa = (np.array(K5[k]) for k in ("theta", "alpha", "se_theta", "se_alpha"))

    def profile(c1):  # c0 has a closed form for fixed c1
        w = 1 / (st_**2 + c1**2 * sa**2)
        c0 = np.sum(w * (th - c1 * al)) / np.sum(w)
        return np.sum(w * (th - c0 - c1 * al) ** 2)

    g = np.linspace(-20, 20, 40001)
    c1 = g[np.argmin([profile(v) for v in g])]
    oracle = optimize.minimize_scalar(profile, bracket=(c1 - 1e-3, c1, c1 + 1e-3), tol=1e-14)
    assert oracle.fun == pytest.approx(0.7722981804956576, rel=1e-9)
    assert r.q == pytest.approx(oracle.fun, rel=1e-8)
    assert r.estimates["c1"] == pytest.approx(oracle.x, rel=1e-4)


def test_decomposition_exact_affine():
    al = np.array([0.1, 0.2, 0.35, 0.5])
    r = q_linearity_decomposition(make_summaries(0.5 + 2 * al, al, [0.05] * 4, [0.0] * 4))
    assert r.q == pytest.approx(0.0, abs=1e-12)


def test_factorization_against_multistart_oracle():
    r = q_linearity_factorization(make_summaries(**K6))
    # frozen from 200 downhill-simplex starts with c0 profiled out
    assert r.q == pytest.approx(0.14130066560507684, rel=1e-8)
    assert r.estimates["beta"] == pytest.approx(2.228787137853525, rel=1e-5)
    assert r.estimates["c1"] == pytest.approx(-0.03429300046606104, rel=1e-3)


def test_factorization_exact_truth():
    al = np.array([0.1, 0.15, 0.2, 0.3, 0.4])
    g = np.array([0.01, -0.02, 0.03, 0.0, 0.05])
    s = make_summaries(1.7 * al, al, [0.05] * 5, [0.0] * 5, gamma=g, se_gamma=[0.02] * 5)
    r = q_linearity_factorization(s)
    assert r.q == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("fn, K", [(q_linearity, 1), (q_linearity_decomposition, 2),
                                   (q_linearity_factorization, 3)])
def test_too_few_strata(fn, K):
    s = make_summaries(**{k: v[:K] for k, v in K6.items()})
    with pytest.raises(ValueError):
        fn(s)


def test_factorization_needs_gamma():
    with pytest.raises(ValueError, match="gamma"):
        q_linearity_factorization(make_summaries(**K5))


def test_unknown_variant():
    with pytest.raises(ValueError):
        q_test(make_summaries(**K3), "profile")


def test_correlation_term_enters_denominator():
    s = make_summaries(**K3)
    s_cov = [type(x)(**{**x.to_dict(), "cov_theta_alpha": 0.0005}) for x in s]
    assert q_linearity(s_cov).q > q_linearity(s_cov, correlated=False).q
    assert q_linearity(s_cov, correlated=False).q == pytest.approx(q_linearity(s).q)


summaries_strategy = st.integers(3, 10).flatmap(lambda K: st.tuples(
    st.lists(st.floats(-2, 2), min_size=K, max_size=K),
    st.lists(st.floats(0.05, 1), min_size=K, max_size=K),
    st.lists(st.floats(0.01, 0.5), min_size=K, max_size=K),
    st.lists(st.floats(0.0, 0.1), min_size=K, max_size=K),
    st.randoms(use_true_random=False),
))


@settings(max_examples=60, deadline=None)
@given(summaries_strategy)
def test_minimizer_and_permutation_invariance(args):
    th, al, st_, sa, rnd = args
    s = make_summaries(th, al, st_, sa)
    r = q_linearity(s)
    th, al, st_, sa = map(np.array, (th, al, st_, sa))
    probes = r.estimates["beta"] + np.linspace(-3, 3, 121)
    assert all(r.q <= q_statistic(b, th, st_, al, sa) * (1 + 1e-9) + 1e-12 for b in probes)
    perm = list(range(len(s)))
    rnd.shuffle(perm)
    r2 = q_linearity([s[i] for i in perm])
    assert r2.q == pytest.approx(r.q, rel=1e-8, abs=1e-12)
