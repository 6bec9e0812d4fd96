import json

import numpy as np
import pytest

from strativ.cli import main
from strativ.data import Dataset, write_dataset
from strativ.simulation import generate, scenario
from strativ.summaries import WeakStratumWarning


@pytest.fixture(scope="module")
def case2_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "case2.csv"
    data, _ = generate(scenario("shape-s2", 2), 50_000, 17)
    write_dataset(data, path)
    return path


@pytest.fixture(scope="module")
def linear_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "linear.csv"
    data, _ = generate(scenario("shape-s2", 1), 50_000, 18)
    write_dataset(data, path)
    return path


def read_json(path):
    return json.loads(path.read_text())


def test_missing_input_reports_path(tmp_path, capsys):
    code = main(["sss", str(tmp_path / "absent.csv"), "-o", str(tmp_path / "out")])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert "absent.csv" in err["message"] and err["exit_code"] == 2
    assert read_json(tmp_path / "out" / "error.json")["error"] == "FileNotFoundError"


def test_bad_cell_is_input_error(tmp_path, capsys):
    p = tmp_path / "d.csv"
    p.write_text("z,x,y\n1,2,3\n0,x,1\n")
    assert main(["stratify", str(p), "-o", str(tmp_path / "o"), "-K", "2"]) == 2
    assert "row 2" in json.loads(capsys.readouterr().err)["message"]


def test_stratify_outputs_and_overwrite_guard(tmp_path, linear_file, capsys):
    out = tmp_path / "o"
    args = ["stratify", str(linear_file), "-o", str(out), "-K", "5"]
    assert main(args) == 0
    res = read_json(out / "results.json")
    assert res["K"] == 5 and res["excluded"] == 0 and res["manifest"] == "manifest.json"
    man = read_json(out / "manifest.json")
    assert man["subcommand"] == "stratify" and "assignment.csv" in man["outputs"]
    assert len(man["input"]["sha256"]) == 64
    before = (out / "results.json").read_bytes()
    assert main(args) == 2
    assert "--force" in json.loads(capsys.readouterr().err)["message"]
    assert (out / "results.json").read_bytes() == before
    assert main(args + ["--force"]) == 0


def test_summaries_and_linearity(tmp_path, linear_file):
    assert main(["summaries", str(linear_file), "-o", str(tmp_path / "s")]) == 0
    rows = (tmp_path / "s" / "summaries.csv").read_text().splitlines()
    assert len(rows) == 11 and "beta_hat" in rows[0]
    assert main(["test-linearity", str(linear_file), "-o", str(tmp_path / "q")]) == 0
    res = read_json(tmp_path / "q" / "results.json")
    assert res["df"] == 9 and 0 <= res["p_value"] <= 1
    assert main(["test-linearity", str(linear_file), "-o", str(tmp_path / "f"),
                 "--variant", "factorization"]) == 0
    assert read_json(tmp_path / "f" / "results.json")["df"] == 7


def test_fit_with_gcv_trace(tmp_path, linear_file):
    out = tmp_path / "fit"
    assert main(["fit", str(linear_file), "-o", str(out), "--basis", "poly:2", "--mode", "sos"]) == 0
    res = read_json(out / "fit.json")
    assert res["gcv_trace"] and "monomial_coefficients" in res
    assert (out / "curve.csv").read_text().startswith("x,h,h_lo,h_hi")


def test_parametric_sos_near_truth(tmp_path):
    data, _ = generate(scenario("linear-s1"), 5_000, 2)
    path = tmp_path / "p1.csv"
    write_dataset(data, path)
    out = tmp_path / "fit"
    with pytest.warns(WeakStratumWarning):
        code = main(["fit", str(path), "-o", str(out), "--basis", "poly:1", "--mode", "sos",
                     "--lambda", "0", "-K", "100", "--se-order", "first"])
    assert code == 0
    res = read_json(out / "fit.json")
    b, cov = np.array(res["monomial_coefficients"]), np.array(res["monomial_cov"])
    # linear truth: h' = 1 + 0 x
    assert np.all(np.abs(b - [1.0, 0.0]) < 4 * np.sqrt(np.diag(cov)))


def test_sof_and_sos_curves_agree_on_narrow_strata(tmp_path):
    rng = np.random.default_rng(0)
    n = 40_000
    z = rng.integers(0, 2, n) - 0.5
    x = 0.1 * z + rng.uniform(-1, 1, n)
    path = tmp_path / "narrow.csv"
    write_dataset(Dataset(z, x, x + 0.5 * x**2 + 0.01 * rng.standard_normal(n)), path)
    curves = {}
    for mode in ("sof", "sos"):
        out = tmp_path / mode
        assert main(["fit", str(path), "-o", str(out), "--basis", "poly:2", "--mode", mode,
                     "-K", "200", "--stratifier", "residual", "--lambda", "0"]) == 0
        rows = np.genfromtxt(out / "curve.csv", delimiter=",", names=True)
        curves[mode] = rows["h"]
    assert np.max(np.abs(curves["sof"] - curves["sos"])) < 0.05


def test_sss_detects_one_changepoint(tmp_path, case2_file):
    out = tmp_path / "sss"
    assert main(["sss", str(case2_file), "-o", str(out), "-K", "100", "--se-order", "first",
                 "--test-linearity"]) == 0
    res = read_json(out / "results.json")
    assert res["l_star"] == 1
    assert abs(res["changepoints"][0]["location"]["mode"]) < 0.3
    assert "p_value" in res["linearity"]
    for name in ("susie_fit.json", "credible_sets.json", "pip.csv", "curve.csv",
                 "summaries.csv", "weights.csv", "manifest.json"):
        assert (out / name).exists()


def test_sss_linearity_on_linear_truth(tmp_path, linear_file):
    out = tmp_path / "sss"
    assert main(["sss", str(linear_file), "-o", str(out), "--test-linearity", "--samples",
                 "1000"]) in (0, 4)
    p = read_json(out / "results.json")["linearity"]["p_value"]
    assert p > 0.05


def test_predict(tmp_path, case2_file):
    out = tmp_path / "pred"
    assert main(["predict", str(case2_file), "-o", str(out), "-K", "100", "--x-star", "1.0"]) == 0
    res = read_json(out / "results.json")
    # raising every exposure to 1 helps only those below it: mean effect is positive
    assert res["mean_prediction"] > res["mean_observed"]


def test_susie_subcommand_with_knot_file(tmp_path, case2_file):
    kf = tmp_path / "knots.txt"
    kf.write_text("\n".join(str(v) for v in [-4.5, -1.0, -0.5, 0.0, 0.5, 1.0]))
    out = tmp_path / "su"
    assert main(["susie", str(case2_file), "-o", str(out), "--knots", str(kf), "-K", "50",
                 "--L", "3", "--samples", "1000"]) == 0
    fit = read_json(out / "susie_fit.json")
    assert len(fit["pi_star"]) == 3 and len(fit["knots"]) == 6


def test_simulate(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--scenario", "linear-s1", "--method", "m3", "--n", "2000",
                 "--reps", "3", "-o", str(out), "--seed", "3"]) == 0
    study = read_json(out / "study.json")
    assert study["reps"] == 3 and study["mse"][2] == 0.0
    assert (out / "mse.csv").read_text().startswith("quantile,x,truth,mse")
    out2 = tmp_path / "data"
    assert main(["simulate", "--scenario", "tutorial", "--n", "100", "--write-data", "t.csv",
                 "-o", str(out2)]) == 0
    assert len((out2 / "t.csv").read_text().splitlines()) == 101


def test_config_file_and_bad_config(tmp_path, linear_file, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[strativ]\nK = 4\n")
    assert main(["stratify", str(linear_file), "-o", str(tmp_path / "a"), "--config", str(cfg)]) == 0
    assert read_json(tmp_path / "a" / "results.json")["K"] == 4
    cfg.write_text("K = 1\n")
    assert main(["stratify", str(linear_file), "-o", str(tmp_path / "b"), "--config", str(cfg)]) == 2
