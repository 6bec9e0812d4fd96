"""``strativ`` command-line front end.

Every subcommand writes into ``--output-dir`` (refusing to overwrite
existing files unless ``--force``), emits JSON for structured results and
long-format CSV for anything plottable, and records a ``manifest.json``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .basis import parse_basis
from .data import AnalysisConfig, DataError, Dataset, load_config, load_dataset, write_dataset
from .pipeline import (
    linearity,
    run_changepoint,
    run_parametric,
    scaled_polynomial,
    stage_one,
)
from .regression import SingularSystemError
from .stratify import stratum_table
from .summaries import StratumError, default_grid, weight_integral_above
from .susie import counterfactual_predict

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_NONCONVERGED = 0, 2, 3, 4
MANIFEST = "manifest.json"


class OutputExistsError(FileExistsError):
    pass


# --- output helpers ------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


class Outputs:
    """Collects output files for one run and guards against overwriting."""

    def __init__(self, directory: Path, force: bool):
        self.dir = Path(directory)
        self.force = force
        self.written: list[str] = []

    def _target(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / name
        if path.exists() and not self.force:
            raise OutputExistsError(f"{path} exists; pass --force to overwrite")
        return path

    def check(self, names) -> None:
        for name in list(names) + [MANIFEST]:
            self._target(name)

    def json(self, name: str, obj) -> None:
        if isinstance(obj, dict):
            obj = {**obj, "manifest": MANIFEST}
        self._target(name).write_text(_dumps(obj))
        self.written.append(name)

    def csv(self, name: str, rows: list[dict], columns=None) -> None:
        path = self._target(name)
        columns = columns or (list(rows[0]) if rows else [])
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_cell(r.get(c)) for c in columns])
        self.written.append(name)

    def curve(self, name: str, curve) -> None:
        curve.to_csv(self._target(name))
        self.written.append(name)

    def dataset(self, name: str, data: Dataset) -> None:
        write_dataset(data, self._target(name))
        self.written.append(name)

    def manifest(self, args, config, input_digest, started: float, seed) -> None:
        files = {}
        for name in self.written:
            files[name] = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
        payload = {
            "subcommand": args.command,
            "argv": sys.argv[1:],
            "config": config.to_dict() if config is not None else None,
            "input": input_digest,
            "seed": seed,
            "elapsed_seconds": round(time.perf_counter() - started, 6),
            "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "versions": {"strativ": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "outputs": files,
        }
        (self.dir / MANIFEST).write_text(_dumps(payload))


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _digest(path) -> dict | None:
    if path is None:
        return None
    p = Path(path)
    return {"path": str(p), "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}


# --- argument parsing -----------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--output-dir", "-o", default="strativ-out", help="directory for outputs")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker bound (default $STRATIV_THREADS or 1)")
    if data:
        p.add_argument("input", help="delimited data file with a header row")
        p.add_argument("--columns", default="z,x,y", help="instrument,exposure,outcome headers")
        p.add_argument("--delimiter", help="field delimiter (default: by extension)")
        p.add_argument("-K", "--strata", type=int, dest="strata_count")
        p.add_argument("-S", "--pre-stratum-size", type=int, dest="pre_stratum_size")
        p.add_argument("--stratifier", choices=["doubly_ranked", "residual"])
        p.add_argument("--se-order", choices=["first", "second"])
        p.add_argument("--exposure-transform", choices=["identity", "log"])
        p.add_argument("--exposure-terms", help="comma list from 1,z,z2,z3,abs_z")
        p.add_argument("--exposure-selection", choices=["fixed", "bic"])
        p.add_argument("--weak-threshold", type=float, dest="weak_stratum_threshold")
        p.add_argument("--grid-size", type=int, dest="candidate_count",
                       help="weight-function grid / knot count P")


def _add_susie(p):
    p.add_argument("--L", type=int, dest="max_effects", help="maximum number of effects")
    p.add_argument("--knots", default="auto", help="'auto' or a file of knot values")
    p.add_argument("--knot-range", help="quantile range lo,hi for automatic knots")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--samples", type=int, dest="posterior_samples")
    p.add_argument("--level", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strativ", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"strativ {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stratify", help="assign individuals to strata")
    _add_common(p)

    p = sub.add_parser("summaries", help="stratum IV associations and weight functions")
    _add_common(p)

    p = sub.add_parser("test-linearity", help="Cochran-Q linearity test")
    _add_common(p)
    p.add_argument("--variant", choices=["standard", "decomposition", "factorization"],
                   default="standard")
    p.add_argument("--ignore-correlation", action="store_true",
                   help="drop the theta/alpha slope covariance from the denominators")

    p = sub.add_parser("fit", help="parametric effect-shape fit")
    _add_common(p)
    p.add_argument("--mode", choices=["sof", "sos"], default="sof")
    p.add_argument("--basis", default="poly:2", help="poly:d, indicator:<knots>, pwl:<knots>")
    p.add_argument("--lambda", dest="lam", default="auto", help="'auto' (GCV) or a value")
    p.add_argument("--penalty-order", type=int)
    p.add_argument("--level", type=float)

    p = sub.add_parser("susie", help="change-point SuSiE fit")
    _add_common(p)
    _add_susie(p)

    p = sub.add_parser("sss", help="end-to-end stratify / summarize / SuSiE")
    _add_common(p)
    _add_susie(p)
    p.add_argument("--test-linearity", action="store_true")

    p = sub.add_parser("predict", help="counterfactual outcomes at --x-star")
    _add_common(p)
    _add_susie(p)
    p.add_argument("--x-star", type=float, required=True)

    p = sub.add_parser("simulate", help="synthetic data and replication studies")
    _add_common(p, data=False)
    p.add_argument("--scenario", required=True, help="preset name, e.g. shape-s2 or tutorial")
    p.add_argument("--case", type=int)
    p.add_argument("--method", default="sss", help="m1, m2, m3, sos, sof, sss, qtest")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--quantiles", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("-K", "--strata", type=int, dest="strata_count")
    p.add_argument("--se-order", choices=["first", "second"])
    p.add_argument("--write-data", metavar="NAME",
                   help="write one dataset of size --n to NAME in the output dir instead")
    return parser


def _config(args) -> AnalysisConfig:
    base = load_config(args.config) if getattr(args, "config", None) else AnalysisConfig()
    over = {}
    for name in ("strata_count", "pre_stratum_size", "stratifier", "se_order", "seed",
                 "weak_stratum_threshold", "candidate_count", "max_effects", "tol", "max_iter",
                 "posterior_samples", "level", "penalty_order", "exposure_transform",
                 "exposure_selection"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if getattr(args, "exposure_terms", None):
        over["exposure_terms"] = tuple(t.strip() for t in args.exposure_terms.split(","))
    if getattr(args, "knot_range", None):
        lo, hi = (float(v) for v in args.knot_range.split(","))
        over["knot_quantile_range"] = (lo, hi)
    return base.updated(**over)


def _load(args) -> Dataset:
    cols = tuple(c.strip() for c in args.columns.split(","))
    return load_dataset(args.input, cols, args.delimiter)


def _read_knots(spec: str):
    if spec == "auto":
        return None
    path = Path(spec)
    if not path.is_file():
        raise FileNotFoundError(f"knot file not found: {path}")
    vals = []
    for tok in path.read_text().replace(",", " ").split():
        try:
            vals.append(float(tok))
        except ValueError:
            continue
    if not vals:
        raise DataError(f"{path}: no knot values")
    return np.array(sorted(vals))


# --- subcommands ------------------------------------------------------------------

def _summary_rows(summaries):
    rows = []
    for s in summaries:
        d = s.to_dict()
        q = 1.959963984540054
        d["beta_lo"] = s.beta_hat - q * s.se_beta
        d["beta_hi"] = s.beta_hat + q * s.se_beta
        rows.append(d)
    return rows


def _weight_rows(weights, grid):
    """Long-format rows of every weight function on the common ``grid``."""
    return [{"stratum": w.stratum, "t": float(t), "cum_above": float(c)}
            for w in weights for t, c in zip(grid, weight_integral_above(w, grid))]


def _pip_rows(fit, knots):
    return [{"effect": l + 1, "knot_index": p, "knot": float(knots[p]),
             "pip": float(fit.pi_star[l, p]), "mu": float(fit.mu_star[l, p]),
             "sigma": float(fit.sigma_star[l, p]), "detected": l in fit.detected}
            for l in range(fit.L) for p in range(len(knots))]


def cmd_stratify(args, out: Outputs, cfg):
    data = _load(args)
    out.check(["assignment.csv", "strata.csv", "results.json"])
    from .stratify import stratify

    a = stratify(data, cfg)
    out.csv("assignment.csv", [{"row": i + 1, "stratum": int(k)} for i, k in enumerate(a.labels)])
    table = stratum_table(data, a)
    out.csv("strata.csv", table)
    out.json("results.json", {"method": a.method, "K": a.K, "excluded": a.excluded_count,
                              "strata": table})
    return EXIT_OK


def cmd_summaries(args, out, cfg):
    data = _load(args)
    out.check(["summaries.csv", "weights.csv", "results.json"])
    stage = stage_one(data, cfg, with_gamma=True)
    out.csv("summaries.csv", _summary_rows(stage.summaries))
    out.csv("weights.csv", _weight_rows(stage.weights, default_grid(data.x, cfg.candidate_count)))
    out.json("results.json", {"summaries": [s.to_dict() for s in stage.summaries],
                              "weak_strata": list(stage.weak_strata),
                              "excluded": stage.assignment.excluded_count})
    return EXIT_OK


def cmd_test_linearity(args, out, cfg):
    data = _load(args)
    out.check(["results.json"])
    res = linearity(data, cfg, args.variant, correlated=not args.ignore_correlation)
    out.json("results.json", res.to_dict())
    return EXIT_OK


def cmd_fit(args, out, cfg):
    data = _load(args)
    out.check(["fit.json", "curve.csv", "summaries.csv"])
    kind = args.basis.split(":", 1)[0].lower()
    if kind in ("poly", "polynomial"):
        basis = scaled_polynomial(int(args.basis.split(":", 1)[1]), data.x)
    else:
        basis = parse_basis(args.basis)
    lam = "auto" if args.lam == "auto" else float(args.lam)
    res = run_parametric(data, cfg, basis, args.mode, lam)
    payload = res.fit.to_dict(basis)
    payload.update({"mode": args.mode, "penalty_order": cfg.penalty_order,
                    "weak_strata": list(res.stage.weak_strata)})
    out.json("fit.json", payload)
    out.curve("curve.csv", res.curve)
    out.csv("summaries.csv", _summary_rows(res.stage.summaries))
    return EXIT_OK


def _changepoint_outputs(out, res, cfg):
    fit, knots = res.fit, res.design.knots
    out.json("susie_fit.json", fit.to_dict())
    out.json("credible_sets.json", {"level": cfg.level, "effects": res.report(cfg.level)})
    out.csv("pip.csv", _pip_rows(fit, knots))
    out.curve("curve.csv", res.curve)
    out.csv("summaries.csv", _summary_rows(res.stage.summaries))


def cmd_susie(args, out, cfg):
    data = _load(args)
    out.check(["susie_fit.json", "credible_sets.json", "pip.csv", "curve.csv", "summaries.csv"])
    res = run_changepoint(data, cfg, _read_knots(args.knots))
    _changepoint_outputs(out, res, cfg)
    return EXIT_OK if res.fit.converged else EXIT_NONCONVERGED


def cmd_sss(args, out, cfg):
    data = _load(args)
    out.check(["results.json", "susie_fit.json", "credible_sets.json", "pip.csv", "curve.csv",
               "summaries.csv", "weights.csv"])
    res = run_changepoint(data, cfg, _read_knots(args.knots))
    payload = {
        "n": data.n,
        "K": cfg.strata_count,
        "excluded": res.stage.assignment.excluded_count,
        "weak_strata": list(res.stage.weak_strata),
        "l_star": res.fit.l_star,
        "converged": res.fit.converged,
        "changepoints": res.report(cfg.level),
        "config": cfg.to_dict(),
    }
    if args.test_linearity:
        from .linearity import q_linearity

        payload["linearity"] = q_linearity(res.stage.summaries).to_dict()
    _changepoint_outputs(out, res, cfg)
    out.csv("weights.csv", _weight_rows(res.stage.weights,
                                        default_grid(data.x, cfg.candidate_count)))
    out.json("results.json", payload)
    return EXIT_OK if res.fit.converged else EXIT_NONCONVERGED


def cmd_predict(args, out, cfg):
    data = _load(args)
    out.check(["predictions.csv", "results.json"])
    res = run_changepoint(data, cfg, _read_knots(args.knots), band=False)
    pred, mean = counterfactual_predict(res.fit, res.design.knots, data, args.x_star)
    out.csv("predictions.csv", [{"row": i + 1, "x": float(x), "y": float(y), "y_pred": float(p)}
                                for i, (x, y, p) in enumerate(zip(data.x, data.y, pred))])
    out.json("results.json", {"x_star": args.x_star, "mean_prediction": mean,
                              "mean_observed": float(data.y.mean()), "l_star": res.fit.l_star,
                              "converged": res.fit.converged})
    return EXIT_OK if res.fit.converged else EXIT_NONCONVERGED


def cmd_simulate(args, out, cfg):
    from .simulation import generate, run_study, scenario

    spec = scenario(args.scenario, args.case)
    seed = cfg.seed
    if args.write_data:
        out.check([args.write_data])
        data, _ = generate(spec, args.n, seed)
        out.dataset(args.write_data, data)
        return EXIT_OK
    out.check(["study.json", "mse.csv"])
    quantiles = [float(q) for q in args.quantiles.split(",")]
    opts = {}
    if args.strata_count is not None:
        opts["strata_count"] = args.strata_count
    if args.se_order is not None:
        opts["se_order"] = args.se_order
    workers = args.threads or int(os.environ.get("STRATIV_THREADS", "1"))
    res = run_study(spec, args.method, args.n, args.reps, quantiles, seed, workers, **opts)
    out.json("study.json", res.to_dict())
    out.csv("mse.csv", res.mse_rows())
    return EXIT_OK


COMMANDS = {
    "stratify": cmd_stratify,
    "summaries": cmd_summaries,
    "test-linearity": cmd_test_linearity,
    "fit": cmd_fit,
    "susie": cmd_susie,
    "sss": cmd_sss,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
}


def _fail(code: int, exc: BaseException, out: Outputs | None) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(_dumps(err))
    if out is not None and not isinstance(exc, OutputExistsError):
        try:
            out.dir.mkdir(parents=True, exist_ok=True)
            (out.dir / "error.json").write_text(_dumps(err))
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.perf_counter()
    out = Outputs(Path(args.output_dir), args.force)
    try:
        cfg = _config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            code = COMMANDS[args.command](args, out, cfg)
        out.manifest(args, cfg, _digest(getattr(args, "input", None)), started, cfg.seed)
        return code
    except (np.linalg.LinAlgError, SingularSystemError, StratumError, ZeroDivisionError,
            FloatingPointError) as exc:
        # checked first: StratumError is also a ValueError
        return _fail(EXIT_NUMERIC, exc, out)
    except (FileNotFoundError, DataError, OutputExistsError, ValueError) as exc:
        return _fail(EXIT_INPUT, exc, out)


if __name__ == "__main__":
    sys.exit(main())
