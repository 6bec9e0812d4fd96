import sys

import numpy as np
import pytest

from strativ.summaries import StratumSummary


def make_summaries(theta, alpha, se_theta, se_alpha, gamma=None, se_gamma=None, se_beta=0.1):
    """Stratum summaries from bare arrays; x_bar is the stratum position."""
    out = []
    for i, (t, a, st, sa) in enumerate(zip(theta, alpha, se_theta, se_alpha)):
        out.append(StratumSummary(
            stratum=i + 1, n_s=100, x_bar=float(i), alpha_hat=float(a), se_alpha=float(sa),
            theta_hat=float(t), se_theta=float(st), beta_hat=float(t) / float(a),
            se_beta=se_beta,
            gamma_hat=None if gamma is None else float(gamma[i]),
            se_gamma=None if se_gamma is None else float(se_gamma[i]),
        ))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, when that module ran."""
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None) and not mod.RAN:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in range(1, mod.N_CRITERIA + 1):
        if k in mod.RESULTS:
            ok, detail = mod.RESULTS[k]
            tr.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        elif k in mod.RAN:
            tr.write_line(f"criterion {k:2d}: FAIL  (errored before a verdict)")
