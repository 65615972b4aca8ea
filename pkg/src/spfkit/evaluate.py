"""Goodness of fit, prediction, out-of-sample metrics, model comparison and synthetic data."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import chi2 as chi2_dist

from .calibration import apply_cmfs, hsm_base_prediction
from .data import Dataset, ModelSpec, SegmentRecord, build_design
from .errors import ArgumentError, SpecError, SpfError
from .likelihood import FixedParams, cap_eta, linear_predictor, rowdot
from .mixed import MixedParams, make_draws
from .optimize import FitResult

MODEL_SCHEMA = "spfkit-model"
MODEL_SCHEMA_VERSION = 1


# -- goodness of fit ----------------------------------------------------------------


@dataclass(frozen=True)
class GofReport:
    loglik_null: float | None
    loglik_convergence: float
    df: int
    aic: float
    bic: float
    mcfadden_r2: float | None
    chi2: float | None
    chi2_p: float | None
    n_obs: int
    bic_degenerate: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def gof_values(
    loglik: float, df: int, n_obs: int, loglik_null: float | None = None, df_null: int | None = None
) -> GofReport:
    """AIC, BIC, McFadden R^2 and the LR chi-square against the null model.

    ``chi2_p`` uses ``df - df_null`` degrees of freedom and is None when that
    is not positive (e.g. an offset-only model, which is its own null).
    """
    if n_obs < 1:
        raise ArgumentError(f"n_obs must be >= 1, got {n_obs}")
    if df < 0:
        raise ArgumentError(f"df must be >= 0, got {df}")
    degenerate = n_obs < 2
    if degenerate:
        warnings.warn("BIC with n_obs = 1 carries no sample-size penalty", stacklevel=2)
    aic = -2.0 * loglik + 2.0 * df
    bic = -2.0 * loglik + df * math.log(n_obs)
    r2 = stat = p = None
    if loglik_null is not None:
        r2 = 1.0 - loglik / loglik_null if loglik_null < 0 else None
        stat = max(2.0 * (loglik - loglik_null), 0.0)
        if df_null is not None and df - df_null >= 1:
            p = float(chi2_dist.sf(stat, df - df_null))
    return GofReport(loglik_null, loglik, df, aic, bic, r2, stat, p, n_obs, degenerate)


def gof(fit: FitResult) -> GofReport:
    return gof_values(fit.loglik_convergence, fit.n_params, fit.n_obs, fit.loglik_null, fit.n_params_null)


# -- model artifacts --------------------------------------------------------------------


@dataclass(frozen=True)
class HsmModel:
    """HSM base SPF, optionally calibrated; ``apply_cmfs`` multiplies segment CMFs in."""

    label: str = "HSM-SPF"
    calibration_factor: float = 1.0
    apply_cmfs: bool = False


@dataclass(frozen=True)
class FittedModel:
    label: str
    spec: ModelSpec
    params: FixedParams | MixedParams
    fixed_names: tuple[str, ...]
    random_names: tuple[str, ...] = ()

    @classmethod
    def from_fit(cls, fit: FitResult, label: str | None = None) -> "FittedModel":
        spec = fit.spec
        if spec.form == 4:
            fixed = ("const",) + spec.fixed_covariates
            random = spec.random_covariates
        elif spec.form == 1:
            fixed, random = ("const",), ()
        elif spec.form == 2:
            fixed, random = ("const", "ln_aadt", "ln_length"), ()
        else:
            fixed, random = ("const",) + spec.covariates, ()
        return cls(label or spec.label or _default_label(spec), spec, fit.params, fixed, random)


def _default_label(spec: ModelSpec) -> str:
    kind = "RP-" if spec.form == 4 else ""
    return f"{kind}{'Poisson' if spec.family == 'poisson' else 'NB'} form {spec.form}"


def model_to_dict(model: HsmModel | FittedModel) -> dict:
    head = {"schema": MODEL_SCHEMA, "version": MODEL_SCHEMA_VERSION, "label": model.label}
    if isinstance(model, HsmModel):
        return {**head, "kind": "hsm", "calibration_factor": model.calibration_factor, "apply_cmfs": model.apply_cmfs}
    p = model.params
    if isinstance(p, MixedParams):
        params = {
            "beta_fixed": [float(v) for v in p.beta_fixed],
            "mu_random": [float(v) for v in p.mu_random],
            "sigma_random": [float(v) for v in p.sigma],
            "ln_alpha": p.ln_alpha,
        }
        kind = "mixed"
    else:
        params = {"beta": [float(v) for v in p.beta], "ln_alpha": p.ln_alpha}
        kind = "fixed"
    return {
        **head,
        "kind": kind,
        "spec": model.spec.to_dict(),
        "fixed_names": list(model.fixed_names),
        "random_names": list(model.random_names),
        "params": params,
    }


def model_from_dict(d: Mapping) -> HsmModel | FittedModel:
    if d.get("schema") != MODEL_SCHEMA:
        raise SpecError(f"not a model artifact (schema={d.get('schema')!r})")
    if d.get("version") != MODEL_SCHEMA_VERSION:
        raise SpecError(f"unsupported model artifact version {d.get('version')!r}")
    kind = d.get("kind")
    if kind == "hsm":
        return HsmModel(d["label"], float(d["calibration_factor"]), bool(d.get("apply_cmfs", False)))
    spec = ModelSpec.from_dict(d["spec"])
    p = d["params"]
    if kind == "mixed":
        params = MixedParams(
            np.array(p["beta_fixed"], float), np.array(p["mu_random"], float),
            np.array(p["sigma_random"], float), p.get("ln_alpha"),
        )
    elif kind == "fixed":
        params = FixedParams(np.array(p["beta"], float), p.get("ln_alpha"))
    else:
        raise SpecError(f"unknown model kind {kind!r}")
    return FittedModel(d["label"], spec, params, tuple(d["fixed_names"]), tuple(d.get("random_names", ())))


def save_model(model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n", encoding="utf-8")


def load_model(path: str | Path):
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- prediction ------------------------------------------------------------------------------


def _canonical_rank(ids: Sequence[str]) -> np.ndarray:
    # Row i of the scoring draw matrix goes to the segment of rank i in sorted-id order.
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    rank = np.empty(len(ids), dtype=int)
    rank[order] = np.arange(len(ids))
    return rank


def predict(model: HsmModel | FittedModel, data: Dataset) -> np.ndarray:
    """Expected crashes over each segment's study period.

    Mixed models return the unconditional mean: the conditional mean averaged
    over a Halton draw matrix regenerated for ``data`` with the model's draw
    count and skip. Draw rows are assigned in sorted segment-id order, so a
    segment's prediction does not depend on where it sits in the file.
    """
    if isinstance(model, HsmModel):
        out = []
        for r in data:
            n = hsm_base_prediction(r.aadt, r.length_miles, r.years)
            if model.apply_cmfs:
                n = apply_cmfs(n, r.cmfs)
            out.append(model.calibration_factor * n)
        return np.array(out)
    design = build_design(data, model.spec)
    if design.fixed_names != model.fixed_names or design.random_names != model.random_names:
        raise SpecError(
            f"model columns {model.fixed_names + model.random_names} do not match data design "
            f"{design.fixed_names + design.random_names}"
        )
    p = model.params
    if isinstance(p, FixedParams):
        eta, _ = cap_eta(linear_predictor(design, p.beta))
        return np.exp(eta)
    base = linear_predictor(design, p.beta_fixed)
    q = len(model.random_names)
    if q == 0:
        return np.exp(cap_eta(base)[0])
    spec = model.spec
    zeta = make_draws(design.n_obs, q, spec.draws, spec.skip).draws[_canonical_rank(design.segment_ids)]
    coef = p.mu_random + p.sigma * zeta
    eta, _ = cap_eta(base[:, None] + (design.random[:, None, :] * coef).sum(axis=-1))
    return np.exp(eta).mean(axis=1)


# -- out-of-sample metrics ---------------------------------------------------------------------


def _pair(observed, predicted):
    o = np.asarray(observed, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if o.shape != p.shape or o.ndim != 1:
        raise ArgumentError(f"observed {o.shape} and predicted {p.shape} must be equal-length vectors")
    if o.size == 0:
        raise ArgumentError("metrics need at least one observation")
    return o, p


def mae(observed, predicted) -> float:
    o, p = _pair(observed, predicted)
    return float(np.mean(np.abs(p - o)))


def rmse(observed, predicted) -> float:
    o, p = _pair(observed, predicted)
    d = np.abs(p - o)
    scale = float(d.max())
    if scale == 0.0 or not np.isfinite(scale):
        return scale
    # scaled so that tiny or huge errors neither underflow nor overflow when squared
    return scale * float(np.sqrt(np.mean((d / scale) ** 2)))


def mpb(observed, predicted) -> float:
    """Mean prediction bias, ``mean(predicted - observed)``; positive means overestimation."""
    o, p = _pair(observed, predicted)
    return float(np.mean(p - o))


@dataclass(frozen=True)
class ValidationReport:
    model_label: str
    mae: float
    rmse: float
    mpb: float
    pairs: tuple[tuple[str, float, float], ...]

    def to_dict(self) -> dict:
        return {
            "model": self.model_label,
            "mae": self.mae,
            "rmse": self.rmse,
            "mpb": self.mpb,
            "pairs": [{"segment_id": s, "observed": o, "predicted": p} for s, o, p in self.pairs],
        }


def validate(model, data: Dataset) -> ValidationReport:
    pred = predict(model, data)
    obs = data.crash_counts()
    pairs = tuple((r.segment_id, float(o), float(p)) for r, o, p in zip(data, obs, pred))
    return ValidationReport(model.label, mae(obs, pred), rmse(obs, pred), mpb(obs, pred), pairs)


@dataclass(frozen=True)
class Comparison:
    reports: tuple[ValidationReport, ...]
    failures: tuple[tuple[str, str], ...] = ()

    @property
    def ranking(self) -> list[str]:
        return [r.model_label for r in self.reports]


def compare(models: Sequence, test: Dataset) -> Comparison:
    """Score every model on ``test`` and rank by MAE, then RMSE, then input order.

    A model that fails to predict is reported in ``failures`` and does not
    stop the others.
    """
    if not models:
        raise ArgumentError("compare needs at least one model")
    scored = []
    failures = []
    for i, m in enumerate(models):
        try:
            scored.append((i, validate(m, test)))
        except SpfError as exc:
            failures.append((getattr(m, "label", f"model {i}"), str(exc)))
    scored.sort(key=lambda t: (t[1].mae, t[1].rmse, t[0]))
    return Comparison(tuple(r for _, r in scored), tuple(failures))


# -- synthetic data ------------------------------------------------------------------------------

#: Uniform ranges (lo, hi) or Bernoulli probabilities for generated covariates.
DEFAULT_RANGES: dict[str, tuple[float, float] | float] = {
    "aadt": (60.0, 14611.0),
    "length_miles": (0.1, 7.2),
    "shoulder_width": (0.0, 12.0),
    "speed_limit": (20.0, 55.0),
    "lane_width": (7.0, 12.0),
    "lane_width_ge_10": 0.5,
    "passing_lane": 0.268,
    "lighting": 0.241,
    "rumble_strips": 0.187,
}

_DERIVED = {"aadt", "aadt_thousands", "length", "length_miles", "ln_aadt", "ln_length", "years"}


def _check_range(name, rng_spec):
    if isinstance(rng_spec, (int, float)):
        if not 0 <= rng_spec <= 1:
            raise ArgumentError(f"{name}: Bernoulli probability must lie in [0, 1], got {rng_spec}")
        return
    lo, hi = rng_spec
    if not lo < hi:
        raise ArgumentError(f"{name}: range must satisfy lo < hi, got ({lo}, {hi})")
    if name in ("aadt", "length_miles") and lo <= 0:
        raise ArgumentError(f"{name}: range must be positive, got ({lo}, {hi})")


def synth_generate(
    truth: FixedParams | MixedParams,
    spec: ModelSpec,
    n_segments: int,
    seed: int,
    covariate_ranges: Mapping | None = None,
    years: int = 5,
    n_regions: int = 4,
) -> Dataset:
    """Simulate a segment dataset from a known model.

    Covariates are uniform on their ranges (0/1 indicators are Bernoulli),
    random coefficients get one normal draw per segment and counts are
    Poisson, or Poisson-gamma when ``truth.ln_alpha`` is set. All randomness
    comes from ``numpy.random.default_rng(seed)`` (PCG64); the Halton
    machinery used for estimation is not involved. The truth is stored in
    ``provenance["truth"]``.
    """
    if n_segments < 1:
        raise ArgumentError("n_segments must be >= 1")
    ranges = dict(DEFAULT_RANGES)
    if covariate_ranges:
        ranges.update(covariate_ranges)
    raw = [c for c in spec.covariates if c not in _DERIVED]
    raw = [c[3:] if c.startswith("ln_") and c not in ranges else c for c in raw]
    for name in ["aadt", "length_miles", *raw]:
        if name not in ranges:
            raise ArgumentError(f"no range given for covariate {name!r}")
        _check_range(name, ranges[name])
    if (truth.ln_alpha is not None) != (spec.family == "nb"):
        raise ArgumentError("truth carries ln_alpha exactly when spec.family is 'nb'")

    rng = np.random.default_rng(seed)

    def column(name):
        r = ranges[name]
        if isinstance(r, (int, float)):
            return (rng.random(n_segments) < r).astype(float)
        return rng.uniform(r[0], r[1], n_segments)

    aadt = column("aadt")
    length = column("length_miles")
    cov_values = {name: column(name) for name in dict.fromkeys(raw)}
    region = rng.integers(1, n_regions + 1, n_segments)
    records = [
        SegmentRecord(
            segment_id=f"S{i + 1:05d}",
            region=f"Region {region[i]}",
            aadt=float(aadt[i]),
            length_miles=float(length[i]),
            years=years,
            crash_count=0,
            covariates={k: float(v[i]) for k, v in cov_values.items()},
        )
        for i in range(n_segments)
    ]
    design = build_design(Dataset(tuple(records)), spec)
    if isinstance(truth, MixedParams):
        eta = design.offset + rowdot(design.fixed, truth.beta_fixed)
        q = design.random.shape[1]
        if len(truth.mu_random) != q:
            raise ArgumentError(f"truth has {len(truth.mu_random)} random means, design has {q} random columns")
        zeta = rng.standard_normal((n_segments, q))
        eta = eta + rowdot(design.random, truth.mu_random + truth.sigma * zeta)
    else:
        if design.random.shape[1]:
            raise ArgumentError("fixed-parameter truth given for a design with random columns")
        eta = linear_predictor(design, truth.beta)
    mean = np.exp(cap_eta(eta)[0])
    if truth.ln_alpha is not None:
        alpha = math.exp(truth.ln_alpha)
        mean = mean * rng.gamma(1.0 / alpha, alpha, n_segments)
    y = rng.poisson(mean)
    records = [replace(r, crash_count=int(c)) for r, c in zip(records, y)]
    truth_record = {
        "kind": "mixed" if isinstance(truth, MixedParams) else "fixed",
        "vector": [float(v) for v in truth.to_vector()],
        "spec": spec.to_dict(),
    }
    return Dataset(
        tuple(records),
        {"source": "synthetic", "rows": n_segments, "seed": seed, "truth": truth_record},
    )
