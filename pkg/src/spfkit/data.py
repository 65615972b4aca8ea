"""Segment records, CSV ingestion, train/test splitting and design matrices."""

from __future__ import annotations

import csv
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ArgumentError, DomainError, InputError, ParseError, SchemaError, SpecError, ValidationError

#: HSM exposure constant: days per year times 10^-6 (million vehicle-miles).
EXPOSURE_SCALE = 365 * 1e-6

#: Shortest segment accepted without a warning (miles).
MIN_SEGMENT_LENGTH = 0.10

FAMILIES = ("poisson", "nb")
FORMS = (1, 2, 3, 4)
RESPONSES = ("total", "per_year")

REQUIRED_FIELDS = ("segment_id", "aadt", "length_miles", "years", "crash_count")

DEFAULT_SCHEMA = {
    "segment_id": "segment_id",
    "region": "region",
    "aadt": "aadt",
    "length_miles": "length_miles",
    "years": "years",
    "crash_count": "crash_count",
    "indicators": ["lane_width_ge_10", "passing_lane"],
}

_CMF_COLUMN = re.compile(r"^cmf_(\d+)$")


@dataclass(frozen=True)
class SegmentRecord:
    segment_id: str
    region: str
    aadt: float
    length_miles: float
    years: int
    crash_count: int
    covariates: Mapping[str, float] = field(default_factory=dict)
    cmfs: tuple[float, ...] = ()


@dataclass(frozen=True)
class Dataset:
    records: tuple[SegmentRecord, ...]
    provenance: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SegmentRecord]:
        return iter(self.records)

    def __getitem__(self, i) -> SegmentRecord:
        return self.records[i]

    @property
    def ids(self) -> list[str]:
        return [r.segment_id for r in self.records]

    def subset(self, indices: Sequence[int], **provenance) -> "Dataset":
        prov = dict(self.provenance)
        prov.update(provenance)
        prov["rows"] = len(indices)
        return Dataset(tuple(self.records[i] for i in indices), prov)

    def crash_counts(self) -> np.ndarray:
        return np.array([r.crash_count for r in self.records], dtype=float)


@dataclass(frozen=True)
class ModelSpec:
    """What to fit: distribution family, functional form and covariate roles.

    ``covariates`` lists every explanatory variable for forms 3 and 4 in
    declaration order; ``random`` names the subset that receives normally
    distributed coefficients under form 4.
    """

    family: str = "poisson"
    form: int = 2
    covariates: tuple[str, ...] = ()
    random: tuple[str, ...] = ()
    draws: int = 200
    skip: int = 10
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 200
    response: str = "total"
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "random", tuple(self.random))
        if self.family not in FAMILIES:
            raise SpecError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.form not in FORMS:
            raise SpecError(f"form must be one of {FORMS}, got {self.form!r}")
        if self.response not in RESPONSES:
            raise SpecError(f"response must be one of {RESPONSES}, got {self.response!r}")
        if self.form in (1, 2) and self.covariates:
            raise SpecError(f"form {self.form} has a fixed column set and takes no covariates")
        if len(set(self.covariates)) != len(self.covariates):
            raise SpecError("duplicate covariate names")
        if self.random and self.form != 4:
            raise SpecError("random parameters require form 4")
        unknown = [name for name in self.random if name not in self.covariates]
        if unknown:
            raise SpecError(f"random covariates not declared in covariates: {unknown}")
        if self.draws < 1:
            raise SpecError("draws must be >= 1")
        if self.skip < 0:
            raise SpecError("skip must be >= 0")
        if not self.tol > 0:
            raise SpecError("tol must be positive")
        if self.max_iter < 1:
            raise SpecError("max_iter must be >= 1")

    @property
    def fixed_covariates(self) -> tuple[str, ...]:
        return tuple(c for c in self.covariates if c not in self.random)

    @property
    def random_covariates(self) -> tuple[str, ...]:
        # Declaration order of `covariates`, which also fixes the Halton prime per dimension.
        return tuple(c for c in self.covariates if c in self.random)

    def with_(self, **changes) -> "ModelSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "form": self.form,
            "covariates": list(self.covariates),
            "random": list(self.random),
            "draws": self.draws,
            "skip": self.skip,
            "seed": self.seed,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "response": self.response,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown ModelSpec fields: {sorted(extra)}")
        kwargs = dict(d)
        if "form" in kwargs:
            kwargs["form"] = int(kwargs["form"])
        return cls(**kwargs)


@dataclass(frozen=True)
class DesignMatrix:
    response: np.ndarray
    offset: np.ndarray
    fixed_names: tuple[str, ...]
    fixed: np.ndarray
    random_names: tuple[str, ...] = ()
    random: np.ndarray | None = None
    segment_ids: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.response)
        rnd = self.random if self.random is not None else np.zeros((n, 0))
        object.__setattr__(self, "random", rnd)
        if self.fixed.shape != (n, len(self.fixed_names)):
            raise SpecError("fixed column matrix does not match response length / names")
        if rnd.shape != (n, len(self.random_names)):
            raise SpecError("random column matrix does not match response length / names")
        if self.offset.shape != (n,) or not np.all(np.isfinite(self.offset)):
            raise SpecError("offset must be a finite vector of length n_obs")
        if "const" not in self.fixed_names:
            raise SpecError("design must contain an intercept column")

    @property
    def n_obs(self) -> int:
        return len(self.response)


def check_record(rec: SegmentRecord, indicators: Sequence[str] = ()) -> list[str]:
    """Return human-readable invariant violations for one record (empty if valid)."""
    problems = []
    if not (rec.aadt > 0 and math.isfinite(rec.aadt)):
        problems.append(f"aadt must be > 0 (got {rec.aadt})")
    if not (rec.length_miles > 0 and math.isfinite(rec.length_miles)):
        problems.append(f"length_miles must be > 0 (got {rec.length_miles})")
    if rec.years < 1 or int(rec.years) != rec.years:
        problems.append(f"years must be an integer >= 1 (got {rec.years})")
    if rec.crash_count < 0 or int(rec.crash_count) != rec.crash_count:
        problems.append(f"crash_count must be a non-negative integer (got {rec.crash_count})")
    bad_cmfs = [c for c in rec.cmfs if not (c > 0 and math.isfinite(c))]
    if bad_cmfs:
        problems.append(f"cmfs must be > 0 (got {bad_cmfs})")
    for name in indicators:
        if name in rec.covariates and rec.covariates[name] not in (0, 1):
            problems.append(f"indicator {name} must be 0 or 1 (got {rec.covariates[name]})")
    return problems


def validate_dataset(records: Sequence[SegmentRecord], indicators: Sequence[str] = ()) -> None:
    offenders = []
    details = []
    seen = set()
    for rec in records:
        problems = check_record(rec, indicators)
        if rec.segment_id in seen:
            problems.append("duplicate segment_id")
        seen.add(rec.segment_id)
        if problems:
            offenders.append(rec.segment_id)
            details.append(f"{rec.segment_id}: {'; '.join(problems)}")
    if offenders:
        raise ValidationError("invalid segment records:\n  " + "\n  ".join(details), offenders)
    short = [r.segment_id for r in records if r.length_miles < MIN_SEGMENT_LENGTH]
    if short:
        warnings.warn(
            f"{len(short)} segment(s) shorter than {MIN_SEGMENT_LENGTH} mi accepted: {short[:10]}",
            stacklevel=3,
        )


def make_dataset(records: Sequence[SegmentRecord], indicators: Sequence[str] = (), **provenance) -> Dataset:
    """Validate in-memory records and wrap them in a :class:`Dataset`."""
    validate_dataset(records, indicators)
    prov = {"source": "memory", "rows": len(records)}
    prov.update(provenance)
    return Dataset(tuple(records), prov)


def _parse_number(text: str, column: str, row_index: int) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"row {row_index}: column {column!r} is not numeric: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"row {row_index}: column {column!r} is not finite: {text!r}")
    return value


def _parse_count(text: str, column: str, row_index: int) -> int | float:
    value = _parse_number(text, column, row_index)
    # Non-integral values are kept so validation can report the segment id.
    return int(value) if value == int(value) else value


def load_segments(path: str | Path, schema: Mapping | None = None) -> Dataset:
    """Read a segment CSV into a validated :class:`Dataset`.

    ``schema`` maps record fields to column names (see ``DEFAULT_SCHEMA``).
    Extra keys:

    * ``years`` may be an integer instead of a column name (constant study period);
    * ``cmfs`` names one column holding a semicolon-joined list (a column
      literally named ``cmfs`` is picked up by default), otherwise any
      ``cmf_1 .. cmf_k`` columns (or an explicit ``cmf_columns`` list) are used;
    * ``covariates`` is a ``{name: column}`` map or a list of column names;
      when omitted every unmapped column becomes a covariate;
    * ``indicators`` lists covariates that must be 0/1.

    Data row indices in error messages are 1-based and exclude the header.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"input file not found: {path}")
    cfg = dict(DEFAULT_SCHEMA)
    if schema:
        cfg.update(schema)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: no header row")
        header = [h.strip() for h in reader.fieldnames]
        reader.fieldnames = header
        rows = list(reader)

    def require(column):
        if column not in header:
            raise SchemaError(f"{path}: missing column {column!r}")
        return column

    cols = {}
    for fld in REQUIRED_FIELDS:
        if fld == "years" and isinstance(cfg.get("years"), (int, float)) and not isinstance(cfg["years"], bool):
            continue
        if fld not in cfg:
            raise SchemaError(f"schema does not map required field {fld!r}")
        cols[fld] = require(cfg[fld])
    region_col = cfg.get("region")
    if region_col is not None and region_col not in header:
        if schema and "region" in schema:
            require(region_col)
        region_col = None

    if cfg.get("cmfs") or (not cfg.get("cmf_columns") and "cmfs" in header):
        cmf_list_col = require(cfg.get("cmfs") or "cmfs")
        cmf_cols = []
    else:
        cmf_list_col = None
        if cfg.get("cmf_columns"):
            cmf_cols = [require(c) for c in cfg["cmf_columns"]]
        else:
            matches = [(int(m.group(1)), h) for h in header if (m := _CMF_COLUMN.match(h))]
            cmf_cols = [h for _, h in sorted(matches)]

    used = set(cols.values()) | set(cmf_cols) | {region_col, cmf_list_col}
    cov_cfg = cfg.get("covariates")
    if cov_cfg is None:
        cov_cols = {h: h for h in header if h not in used}
    elif isinstance(cov_cfg, Mapping):
        cov_cols = {name: require(col) for name, col in cov_cfg.items()}
    else:
        cov_cols = {col: require(col) for col in cov_cfg}
    indicators = list(cfg.get("indicators") or [])

    records = []
    for i, row in enumerate(rows, start=1):
        if None in row:
            raise ParseError(f"row {i}: more cells than header columns")
        seg_id = (row[cols["segment_id"]] or "").strip()
        if not seg_id:
            raise ParseError(f"row {i}: empty segment_id")
        if "years" in cols:
            years = _parse_count(row[cols["years"]], cols["years"], i)
        else:
            years = int(cfg["years"])
        cmfs: list[float] = []
        if cmf_list_col is not None:
            cell = (row[cmf_list_col] or "").strip()
            if cell:
                cmfs = [_parse_number(tok.strip(), cmf_list_col, i) for tok in cell.split(";") if tok.strip()]
        else:
            for c in cmf_cols:
                cell = (row[c] or "").strip()
                if cell:
                    cmfs.append(_parse_number(cell, c, i))
        covariates = {name: _parse_number(row[col], col, i) for name, col in cov_cols.items()}
        records.append(
            SegmentRecord(
                segment_id=seg_id,
                region=(row[region_col].strip() if region_col else "all"),
                aadt=_parse_number(row[cols["aadt"]], cols["aadt"], i),
                length_miles=_parse_number(row[cols["length_miles"]], cols["length_miles"], i),
                years=years,
                crash_count=_parse_count(row[cols["crash_count"]], cols["crash_count"], i),
                covariates=covariates,
                cmfs=tuple(cmfs),
            )
        )
    validate_dataset(records, indicators)
    return Dataset(tuple(records), {"source": str(path), "rows": len(records)})


def write_segments(data: Dataset, path: str | Path) -> None:
    """Write a dataset in the default CSV layout (cmfs semicolon-joined)."""
    cov_names: list[str] = []
    for rec in data:
        for name in rec.covariates:
            if name not in cov_names:
                cov_names.append(name)
    header = ["segment_id", "region", "aadt", "length_miles", "years", "crash_count", *cov_names, "cmfs"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in data:
            w.writerow(
                [rec.segment_id, rec.region, repr(float(rec.aadt)), repr(float(rec.length_miles)), rec.years, rec.crash_count]
                + [repr(float(rec.covariates[n])) if n in rec.covariates else "" for n in cov_names]
                + [";".join(repr(float(c)) for c in rec.cmfs)]
            )


# -- splitting ---------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 (Steele, Lea & Flood 2014); 64-bit state, one output per step.

    Used for train/test partitions so the permutation is reproducible from
    the seed alone, in any language.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection (no modulo bias)."""
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound


def permutation(n: int, seed: int) -> list[int]:
    """Fisher-Yates shuffle of ``range(n)`` driven by :class:`SplitMix64`.

    For ``i = n-1 .. 1`` swap position ``i`` with ``j = below(i + 1)``.
    """
    rng = SplitMix64(seed)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def split(data: Dataset, train_fraction: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Simple random train/test partition.

    The first ``round(train_fraction * n)`` (half rounds up) entries of
    :func:`permutation` form the training set. Both parts keep file order.
    """
    if not 0 < train_fraction < 1:
        raise ArgumentError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(data)
    if n == 0:
        raise ArgumentError("cannot split an empty dataset")
    n_train = int(math.floor(train_fraction * n + 0.5))
    perm = permutation(n, seed)
    train_idx = sorted(perm[:n_train])
    test_idx = sorted(perm[n_train:])
    info = {"split_seed": seed, "train_fraction": train_fraction}
    return data.subset(train_idx, part="train", **info), data.subset(test_idx, part="test", **info)


# -- design matrices -----------------------------------------------------------

_BUILTIN = {
    "aadt": lambda r: r.aadt,
    "aadt_thousands": lambda r: r.aadt / 1000.0,
    "length": lambda r: r.length_miles,
    "length_miles": lambda r: r.length_miles,
    "ln_aadt": lambda r: _log(r.aadt, "aadt", r),
    "ln_length": lambda r: _log(r.length_miles, "length_miles", r),
    "years": lambda r: float(r.years),
}


def _log(value: float, what: str, rec: SegmentRecord) -> float:
    if not value > 0:
        raise DomainError(f"segment {rec.segment_id}: log of non-positive {what} ({value})")
    return math.log(value)


def covariate_value(rec: SegmentRecord, name: str) -> float:
    """Resolve a covariate name: built-in derived columns first, then ``rec.covariates``.

    Built-ins: ``aadt``, ``aadt_thousands``, ``length`` / ``length_miles``,
    ``ln_aadt``, ``ln_length``, ``years``. A ``ln_<name>`` prefix takes the log
    of any stored covariate.
    """
    if name in _BUILTIN:
        return _BUILTIN[name](rec)
    if name in rec.covariates:
        return float(rec.covariates[name])
    if name.startswith("ln_") and name[3:] in rec.covariates:
        return _log(float(rec.covariates[name[3:]]), name[3:], rec)
    raise SpecError(f"unknown covariate {name!r} (segment {rec.segment_id})")


def exposure(rec: SegmentRecord) -> float:
    """Exposure in million vehicle-miles per year: AADT * L * 365 * 1e-6."""
    return rec.aadt * rec.length_miles * EXPOSURE_SCALE


def _columns(data: Dataset, names: Sequence[str]) -> np.ndarray:
    out = np.empty((len(data), len(names)))
    for j, name in enumerate(names):
        for i, rec in enumerate(data):
            out[i, j] = covariate_value(rec, name)
    return out


def build_design(data: Dataset, spec: ModelSpec) -> DesignMatrix:
    """Response, offset and fixed/random column matrices for ``spec.form``.

    form 1: intercept only, offset ln(AADT * L * 365e-6 * years)
    form 2: [const, ln AADT, ln L], no offset
    form 3: [const, *covariates]
    form 4: as form 3, with ``spec.random`` columns moved to the random block

    With ``response="per_year"`` forms 2-4 carry ln(years) as offset so the
    coefficients describe annual frequencies; form 1 already includes years.
    """
    n = len(data)
    if n == 0:
        raise ArgumentError("cannot build a design from an empty dataset")
    y = np.array([r.crash_count for r in data], dtype=float)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise DomainError("crash counts must be non-negative integers")
    years = np.array([r.years for r in data], dtype=float)
    offset = np.zeros(n)
    random_names: tuple[str, ...] = ()
    random = None
    if spec.form == 1:
        for r in data:
            if not (r.aadt > 0 and r.length_miles > 0 and r.years >= 1):
                raise DomainError(f"segment {r.segment_id}: exposure requires aadt, length > 0 and years >= 1")
        offset = np.log(np.array([exposure(r) * r.years for r in data]))
        names: tuple[str, ...] = ("const",)
        fixed = np.ones((n, 1))
    elif spec.form == 2:
        names = ("const", "ln_aadt", "ln_length")
        fixed = np.column_stack([np.ones(n), _columns(data, names[1:])])
    else:
        names = ("const",) + spec.fixed_covariates
        fixed = np.column_stack([np.ones(n), _columns(data, spec.fixed_covariates)])
        if spec.form == 4:
            random_names = spec.random_covariates
            random = _columns(data, random_names)
    if spec.response == "per_year" and spec.form != 1:
        offset = np.log(years)
    return DesignMatrix(
        response=y,
        offset=offset,
        fixed_names=names,
        fixed=fixed,
        random_names=random_names,
        random=random,
        segment_ids=tuple(data.ids),
    )
