"""Data containers, delimited-text ingestion and run configuration."""
from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "AnalysisConfig",
    "DataError",
    "load_dataset",
    "write_dataset",
    "load_config",
]


class DataError(ValueError):
    """Raised for malformed input files or invalid configuration."""


def _frozen(values: Iterable[float]) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Aligned instrument, exposure and outcome columns.

    Arrays are stored read-only so a dataset can be shared between workers.
    """

    z: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        z, x, y = (_frozen(np.ravel(v)) for v in (self.z, self.x, self.y))
        if not (len(z) == len(x) == len(y)):
            raise DataError(
                f"column lengths differ: z={len(z)}, x={len(x)}, y={len(y)}"
            )
        if len(z) == 0:
            raise DataError("dataset is empty")
        for name, arr in (("z", z), ("x", x), ("y", y)):
            if not np.all(np.isfinite(arr)):
                bad = int(np.flatnonzero(~np.isfinite(arr))[0])
                raise DataError(f"non-finite value in column {name} at row {bad + 1}")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return len(self.z)

    def subset(self, index) -> "Dataset":
        return Dataset(self.z[index], self.x[index], self.y[index])

    def with_outcome(self, y) -> "Dataset":
        return Dataset(self.z, self.x, y)


def _sniff_delimiter(path: Path, delimiter: str | None) -> str:
    if delimiter is not None:
        return "\t" if delimiter in ("tab", "\\t") else delimiter
    return "\t" if path.suffix.lower() in (".tsv", ".tab") else ","


def load_dataset(
    path,
    columns: Sequence[str] = ("z", "x", "y"),
    delimiter: str | None = None,
) -> Dataset:
    """Read a delimited text file with a header row into a :class:`Dataset`.

    Parameters
    ----------
    path : path-like
        Input file. ``.tsv``/``.tab`` files default to tab separation,
        anything else to commas.
    columns : (str, str, str)
        Header names holding the instrument, exposure and outcome.
    delimiter : str, optional
        Explicit delimiter; ``"tab"`` is accepted for ``"\\t"``.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    DataError
        On missing columns, empty files, or blank/non-numeric cells. Row
        numbers in messages count data rows from 1 (the header is row 0).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    if len(columns) != 3:
        raise DataError("column map must name exactly three columns (z, x, y)")
    delim = _sniff_delimiter(path, delimiter)

    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in columns]

        cols: list[list[float]] = [[], [], []]
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            for j, (name, k) in enumerate(zip(columns, idx)):
                cell = row[k].strip() if k < len(row) else ""
                if cell == "":
                    raise DataError(f"{path}: row {row_no}: missing value in column {name!r}")
                try:
                    val = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {row_no}: non-numeric value {cell!r} in column {name!r}"
                    ) from None
                if not math.isfinite(val):
                    raise DataError(f"{path}: row {row_no}: non-finite value in column {name!r}")
                cols[j].append(val)

    if not cols[0]:
        raise DataError(f"{path}: no data rows")
    return Dataset(*cols)


def write_dataset(data: Dataset, path, columns: Sequence[str] = ("z", "x", "y"),
                  delimiter: str = ",") -> None:
    # repr() of a float round-trips exactly
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(columns)
        for row in zip(data.z.tolist(), data.x.tolist(), data.y.tolist()):
            w.writerow([repr(v) for v in row])


STRATIFIERS = ("residual", "doubly_ranked")
SE_ORDERS = ("first", "second")


@dataclass(frozen=True)
class AnalysisConfig:
    """Settings shared by the whole pipeline.

    ``pre_stratum_size`` of ``None`` means "same as ``strata_count``".
    """

    strata_count: int = 10
    pre_stratum_size: int | None = None
    candidate_count: int = 100
    max_effects: int = 10
    se_order: str = "second"
    stratifier: str = "doubly_ranked"
    knot_quantile_range: tuple[float, float] = (0.05, 0.95)
    seed: int = 0
    weak_stratum_threshold: float = 4.0
    penalty_order: int = 2
    level: float = 0.95
    posterior_samples: int = 10_000
    tol: float = 1e-6
    max_iter: int = 100
    exposure_transform: str = "identity"
    exposure_terms: tuple[str, ...] = ("1", "z")
    exposure_selection: str = "fixed"

    def __post_init__(self):
        K, P, L = self.strata_count, self.candidate_count, self.max_effects
        if int(K) != K or K < 2:
            raise DataError(f"strata_count must be an integer > 1, got {K}")
        if self.pre_stratum_size is not None:
            S = self.pre_stratum_size
            if S < K or S % K:
                raise DataError(f"pre_stratum_size {S} must be a positive multiple of strata_count {K}")
        if P < 1:
            raise DataError("candidate_count must be >= 1")
        if L < 1:
            raise DataError("max_effects must be >= 1")
        if self.se_order not in SE_ORDERS:
            raise DataError(f"se_order must be one of {SE_ORDERS}")
        if self.stratifier not in STRATIFIERS:
            raise DataError(f"stratifier must be one of {STRATIFIERS}")
        lo, hi = self.knot_quantile_range
        if not (0.0 <= lo < hi <= 1.0):
            raise DataError(f"knot_quantile_range must satisfy 0 <= lo < hi <= 1, got {(lo, hi)}")
        if self.seed < 0:
            raise DataError("seed must be non-negative")
        if not 0 < self.level < 1:
            raise DataError("level must be in (0, 1)")
        if self.penalty_order < 1:
            raise DataError("penalty_order must be >= 1")

    @property
    def S(self) -> int:
        return self.strata_count if self.pre_stratum_size is None else self.pre_stratum_size

    def check_sample_size(self, n: int) -> None:
        if self.strata_count > n:
            raise DataError(f"strata_count {self.strata_count} exceeds sample size {n}")

    def updated(self, **overrides) -> "AnalysisConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_ALIASES = {"K": "strata_count", "S": "pre_stratum_size", "P": "candidate_count",
            "L": "max_effects"}


def _coerce(name: str, raw: str, current):
    raw = raw.strip()
    if name == "pre_stratum_size":
        return None if raw.lower() in ("", "none") else int(raw)
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw.replace(";", ",").split(",") if p.strip()]
        if name == "knot_quantile_range":
            if len(parts) != 2:
                raise DataError("knot_quantile_range needs two values: lo, hi")
            return (float(parts[0]), float(parts[1]))
        return tuple(parts)
    return raw


def config_from_mapping(values: Mapping[str, str], base: AnalysisConfig | None = None) -> AnalysisConfig:
    base = base or AnalysisConfig()
    known = {f.name for f in fields(AnalysisConfig)}
    updates = {}
    for key, raw in values.items():
        name = _ALIASES.get(key, key.strip().lower().replace("-", "_"))
        if name not in known:
            raise DataError(f"unknown configuration key {key!r}")
        try:
            updates[name] = _coerce(name, str(raw), getattr(base, name))
        except ValueError as exc:
            raise DataError(f"bad value for {key!r}: {exc}") from None
    return replace(base, **updates)


def load_config(path) -> AnalysisConfig:
    """Read ``key = value`` lines (an optional ``[strativ]`` section header is allowed)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if not text.lstrip().startswith("["):
        text = "[strativ]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise DataError(f"{path}: {exc}") from None
    section = parser["strativ"] if parser.has_section("strativ") else parser[parser.sections()[0]]
    return config_from_mapping(dict(section))
