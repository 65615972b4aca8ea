"""Crash rates and the HSM rural two-lane predictive chain.

The base SPF for rural two-lane, two-way segments predicts, for a study
period of ``years`` years::

    N_spf = years * AADT * L * 365e-6 * exp(-0.312)

CMFs scale that prediction multiplicatively and a calibration factor
``C = sum(observed) / sum(predicted)`` localises it.
"""

from __future__ import annotations

import math
import statistics
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .data import EXPOSURE_SCALE, Dataset
from .errors import ArgumentError, ComputationError, DomainError

HSM_INTERCEPT = -0.312

#: Vehicle-miles denominator of the VMT rate.
VMT_UNIT = 1e8


@dataclass(frozen=True)
class RateSummary:
    group: str
    n: int
    mean: float
    sd: float
    min: float
    max: float


@dataclass(frozen=True)
class CalibrationResult:
    group: str
    n: int
    c_base: float
    c_adj: float
    sum_observed: float
    sum_predicted_base: float
    sum_predicted_adjusted: float
    adjusted: bool = True

    @property
    def factor(self) -> float:
        return self.c_adj if self.adjusted else self.c_base

    def to_dict(self) -> dict:
        return asdict(self)


def _positive(**values):
    for name, v in values.items():
        if not v > 0:
            raise DomainError(f"{name} must be > 0, got {v}")


def crash_rate_vmt(c: float, v: float, n: float, l: float) -> float:
    """Crashes per 100 million vehicle-miles: ``c * 1e8 / (v * 365 * n * l)``."""
    _positive(aadt=v, years=n, length=l)
    if c < 0:
        raise DomainError(f"crash count must be >= 0, got {c}")
    return c * VMT_UNIT / (v * 365 * n * l)


def crash_rate_per_mile(c: float, n: float, l: float) -> float:
    """Crashes per mile per year."""
    _positive(years=n, length=l)
    if c < 0:
        raise DomainError(f"crash count must be >= 0, got {c}")
    return c / (n * l)


def segment_rates(data: Dataset, kind: str = "vmt") -> list[float]:
    if kind == "vmt":
        return [crash_rate_vmt(r.crash_count, r.aadt, r.years, r.length_miles) for r in data]
    if kind == "per_mile":
        return [crash_rate_per_mile(r.crash_count, r.years, r.length_miles) for r in data]
    raise ArgumentError(f"kind must be 'vmt' or 'per_mile', got {kind!r}")


def _groups(data: Dataset, group_by: str) -> dict[str, list[int]]:
    if group_by == "all":
        return {"all": list(range(len(data)))}
    if group_by != "region":
        raise ArgumentError(f"group_by must be 'region' or 'all', got {group_by!r}")
    groups: dict[str, list[int]] = {}
    for i, rec in enumerate(data):
        groups.setdefault(rec.region, []).append(i)
    return dict(sorted(groups.items()))


def rate_summary(
    data: Dataset, kind: str = "vmt", group_by: str = "all", groups: Iterable[str] | None = None
) -> list[RateSummary]:
    """Per-group n / mean / sample sd / min / max of segment crash rates.

    ``groups`` optionally requests specific region labels; labels with no
    segments are skipped with a warning. A single-member group has sd 0.
    """
    if len(data) == 0:
        raise ArgumentError("rate_summary needs a non-empty dataset")
    rates = segment_rates(data, kind)
    members = _groups(data, group_by)
    labels = list(groups) if groups is not None else list(members)
    out = []
    for label in labels:
        idx = members.get(label, [])
        if not idx:
            warnings.warn(f"group {label!r} has no segments; omitted", stacklevel=2)
            continue
        vals = [rates[i] for i in idx]
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out.append(RateSummary(label, len(vals), statistics.fmean(vals), sd, min(vals), max(vals)))
    return out


def hsm_base_prediction(aadt: float, l: float, years: float = 1) -> float:
    """Base HSM prediction of crashes over ``years`` years."""
    _positive(aadt=aadt, length=l)
    if years < 1:
        raise DomainError(f"years must be >= 1, got {years}")
    return years * aadt * l * EXPOSURE_SCALE * math.exp(HSM_INTERCEPT)


def apply_cmfs(n_spf: float, cmfs: Sequence[float]) -> float:
    if n_spf < 0:
        raise DomainError(f"predicted crashes must be >= 0, got {n_spf}")
    bad = [c for c in cmfs if not c > 0]
    if bad:
        raise DomainError(f"CMFs must be > 0, got {bad}")
    return n_spf * math.prod(cmfs)


def calibrated_prediction(aadt: float, l: float, years: float, c: float) -> float:
    if not c > 0:
        raise DomainError(f"calibration factor must be > 0, got {c}")
    return c * hsm_base_prediction(aadt, l, years)


def calibration_factor(data: Dataset, adjusted: bool = True, group_by: str = "all") -> list[CalibrationResult]:
    """Base and CMF-adjusted calibration factors per group.

    With ``adjusted=False`` CMFs are ignored and ``c_adj == c_base``.
    """
    results = []
    for label, idx in _groups(data, group_by).items():
        obs = base = adj = 0.0
        for i in idx:
            r = data[i]
            n_spf = hsm_base_prediction(r.aadt, r.length_miles, r.years)
            obs += r.crash_count
            base += n_spf
            adj += apply_cmfs(n_spf, r.cmfs) if adjusted else n_spf
        if base <= 0 or adj <= 0:
            raise ComputationError(f"group {label!r}: sum of predicted crashes is zero")
        results.append(
            CalibrationResult(
                group=label,
                n=len(idx),
                c_base=obs / base,
                c_adj=obs / adj,
                sum_observed=obs,
                sum_predicted_base=base,
                sum_predicted_adjusted=adj,
                adjusted=adjusted,
            )
        )
    return results
