"""Maximum-likelihood fitting of fixed-parameter count models.

``maximize`` is a BFGS ascent with backtracking; standard errors come from
the inverse of a numerical Hessian built by central differences of the
analytic gradient, evaluated once at the optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import chi2

from .data import Dataset, DesignMatrix, ModelSpec, build_design
from .errors import ArgumentError, OptimizationError, SpecError
from .likelihood import FixedParams, nb_loglik, poisson_loglik

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

#: Starting dispersion for NB fits.
INITIAL_ALPHA = 0.5


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    converged: bool
    iterations: int
    evaluations: int
    trace: list = field(default_factory=list)
    message: str = ""

    @property
    def gradient_max(self) -> float:
        return float(np.max(np.abs(self.gradient))) if self.gradient.size else 0.0


def maximize(objective: Objective, init, tol: float = 1e-6, max_iter: int = 200) -> OptimizeResult:
    """Quasi-Newton (BFGS) ascent with backtracking line search.

    Stops when the gradient max-norm drops below ``tol`` or after
    ``max_iter`` iterations. Non-finite trial points halve the step. Near the
    optimum the objective stops resolving further ascent (differences below
    ~1e-12 relative), so a step that keeps the value within that band while
    shrinking the gradient is accepted as well.
    """
    x = np.array(init, dtype=float)
    f, g = objective(x)
    evals = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationError("objective is not finite at the initial point", [(0, f, None, None)])
    n = x.size
    hinv = np.eye(n)
    scaled = False
    trace = [(0, float(f), float(np.max(np.abs(g))) if n else 0.0, 0.0)]
    c1 = 1e-4
    message = "maximum iterations reached"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gmax = float(np.max(np.abs(g))) if n else 0.0
        if gmax < tol:
            converged = True
            message = "gradient tolerance reached"
            it -= 1
            break
        # Ascent direction for -f minimisation: d = H g.
        d = hinv @ g
        slope = float(g @ d)
        if slope <= 0:
            hinv = np.eye(n)
            d = g.copy()
            slope = float(g @ d)
        if not scaled:
            # First step: keep the largest move in any coordinate at 1 unit.
            d *= min(1.0, 1.0 / max(np.max(np.abs(d)), 1e-300))
            slope = float(g @ d)
        noise = 1e-12 * max(1.0, abs(f))
        gnorm = float(np.linalg.norm(g))
        t = 1.0
        accepted = False
        non_finite = 0
        while t > 1e-20:
            x_new = x + t * d
            f_new, g_new = objective(x_new)
            evals += 1
            if not (np.isfinite(f_new) and np.all(np.isfinite(g_new))):
                non_finite += 1
                t *= 0.5
                continue
            if f_new >= f + c1 * t * slope:
                accepted = True
                break
            if f_new >= f - noise and np.linalg.norm(g_new) < gnorm:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if non_finite and non_finite == evals - 1:
                raise OptimizationError("objective is non-finite along every trial step", trace)
            if not np.array_equal(hinv, np.eye(n)):
                hinv = np.eye(n)
                scaled = False
                trace.append((it, float(f), gmax, 0.0))
                continue
            message = "line search failed"
            break
        s = x_new - x
        yv = g - g_new  # gradient change of the minimised function -f
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if not scaled:
                hinv = np.eye(n) * (sy / float(yv @ yv))
                scaled = True
            rho = 1.0 / sy
            hy = hinv @ yv
            hinv = hinv + ((sy + yv @ hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(hy, s) + np.outer(s, hy))
        x, f, g = x_new, f_new, g_new
        trace.append((it, float(f), float(np.max(np.abs(g))), t))
    else:
        if n == 0 or float(np.max(np.abs(g))) < tol:
            converged = True
            message = "gradient tolerance reached"
    return OptimizeResult(x, float(f), g, converged, it, evals, trace, message)


def numeric_hessian(gradient: Callable[[np.ndarray], np.ndarray], x, rel_step: float = 1e-5) -> np.ndarray:
    """Symmetrised central-difference Jacobian of an analytic gradient."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h_mat = np.empty((n, n))
    for j in range(n):
        h = rel_step * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        h_mat[:, j] = (gradient(xp) - gradient(xm)) / (2 * h)
    return 0.5 * (h_mat + h_mat.T)


def covariance_from_hessian(hessian: np.ndarray) -> np.ndarray | None:
    """Inverse of the negative Hessian, or None when it is not positive definite."""
    if hessian.size == 0:
        return np.zeros((0, 0))
    info = -hessian
    try:
        chol = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        return None
    inv_chol = np.linalg.inv(chol)
    cov = inv_chol.T @ inv_chol
    if not np.all(np.isfinite(cov)):
        return None
    return 0.5 * (cov + cov.T)


@dataclass
class FitResult:
    """A fitted model.

    ``names`` / ``estimates`` / ``std_errors`` / ``t_stats`` are the reported
    table: dispersion is shown as alpha (delta-method SE) and random-parameter
    spreads as |sigma|. ``covariance`` is on the internal parameter scale.
    """

    spec: ModelSpec
    params: object
    names: list[str]
    estimates: np.ndarray
    std_errors: np.ndarray
    t_stats: np.ndarray
    loglik_convergence: float
    loglik_null: float
    n_obs: int
    n_params: int
    n_params_null: int
    converged: bool
    iterations: int
    gradient_max: float
    covariance: np.ndarray | None
    message: str = ""
    effectively_fixed: list[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def hessian_invertible(self) -> bool:
        return self.covariance is not None

    @property
    def kind(self) -> str:
        return "mixed" if self.spec.form == 4 else "fixed"

    def coefficient(self, name: str) -> float:
        return float(self.estimates[self.names.index(name)])

    def to_dict(self) -> dict:
        def clean(v):
            v = float(v)
            return v if math.isfinite(v) else None

        return {
            "spec": self.spec.to_dict(),
            "kind": self.kind,
            "coefficients": [
                {"name": n, "estimate": clean(b), "std_error": clean(s), "t_stat": clean(t)}
                for n, b, s, t in zip(self.names, self.estimates, self.std_errors, self.t_stats)
            ],
            "loglik_convergence": self.loglik_convergence,
            "loglik_null": self.loglik_null,
            "n_obs": self.n_obs,
            "n_params": self.n_params,
            "converged": self.converged,
            "iterations": self.iterations,
            "gradient_max": self.gradient_max,
            "hessian_invertible": self.hessian_invertible,
            "message": self.message,
            "effectively_fixed": list(self.effectively_fixed),
            "extras": self.extras,
        }


def coefficient_table(fit: FitResult) -> str:
    """Plain-text table of estimates and t-statistics."""
    width = max([len(n) for n in fit.names] + [8])
    lines = [f"{'variable':<{width}}  {'beta':>10}  {'SE':>9}  {'t-stat':>8}"]
    for n, b, s, t in zip(fit.names, fit.estimates, fit.std_errors, fit.t_stats):
        se = f"{s:9.4f}" if math.isfinite(s) else f"{'--':>9}"
        ts = f"{t:8.2f}" if math.isfinite(t) else f"{'--':>8}"
        lines.append(f"{n:<{width}}  {b:10.4f}  {se}  {ts}")
    lines.append(f"LL(convergence) {fit.loglik_convergence:.3f}   LL(null) {fit.loglik_null:.3f}   N {fit.n_obs}")
    if fit.effectively_fixed:
        lines.append("effectively fixed (sd t-stat < 1.96): " + ", ".join(fit.effectively_fixed))
    return "\n".join(lines)


def _fixed_objective(design: DesignMatrix, family: str) -> Objective:
    if family == "poisson":
        def objective(v):
            lv = poisson_loglik(design, v)
            return lv.loglik, lv.gradient
    else:
        def objective(v):
            lv = nb_loglik(design, v[:-1], v[-1])
            return lv.loglik, lv.gradient
    return objective


def initial_vector(design: DesignMatrix, family: str) -> np.ndarray:
    """Zero slopes, intercept at ln(mean y) minus the mean offset, ln alpha = ln 0.5."""
    beta = np.zeros(design.fixed.shape[1])
    ybar = max(float(np.mean(design.response)), 1e-3)
    beta[design.fixed_names.index("const")] = math.log(ybar) - float(np.mean(design.offset))
    return np.append(beta, math.log(INITIAL_ALPHA)) if family == "nb" else beta


def fit_design(design: DesignMatrix, family: str, tol: float = 1e-6, max_iter: int = 200, init=None):
    """Maximise a fixed-parameter likelihood on a prepared design.

    Returns ``(OptimizeResult, covariance or None)``.
    """
    objective = _fixed_objective(design, family)
    x0 = initial_vector(design, family) if init is None else np.asarray(init, dtype=float)
    opt = maximize(objective, x0, tol=tol, max_iter=max_iter)
    hess = numeric_hessian(lambda v: objective(v)[1], opt.x)
    return opt, covariance_from_hessian(hess)


def intercept_design(design: DesignMatrix, keep_offset: bool) -> DesignMatrix:
    n = design.n_obs
    return DesignMatrix(
        response=design.response,
        offset=design.offset if keep_offset else np.zeros(n),
        fixed_names=("const",),
        fixed=np.ones((n, 1)),
        segment_ids=design.segment_ids,
    )


def _null_from_design(design: DesignMatrix, spec: ModelSpec, tol: float, max_iter: int) -> float:
    # Form 1 keeps its exposure offset; other forms keep only a per-year offset.
    keep = spec.form == 1 or spec.response == "per_year"
    null = intercept_design(design, keep_offset=keep)
    if spec.family == "poisson":
        y = null.response
        total = float(np.sum(y))
        if total == 0:
            return 0.0
        b0 = math.log(total / float(np.sum(np.exp(null.offset))))
        return poisson_loglik(null, [b0]).loglik
    opt, _ = fit_design(null, "nb", tol, max_iter)
    return opt.value


def null_loglik(data: Dataset, spec: ModelSpec) -> float:
    """Log-likelihood of the intercept-only model of the same family."""
    return _null_from_design(build_design(data, spec), spec, spec.tol, spec.max_iter)


def summarize(names, vec, cov, family: str, sigma_slice: slice | None = None):
    """Reported (names, estimates, SE, t) from internal parameters.

    ln alpha becomes alpha with SE ``alpha * se(ln alpha)``; entries in
    ``sigma_slice`` are reported as absolute values.
    """
    names = list(names)
    est = np.array(vec, dtype=float)
    se = np.sqrt(np.clip(np.diag(cov), 0, None)) if cov is not None else np.full(est.size, np.nan)
    if sigma_slice is not None:
        est[sigma_slice] = np.abs(est[sigma_slice])
    if family == "nb":
        alpha = math.exp(est[-1])
        est[-1] = alpha
        se[-1] = alpha * se[-1]
        names[-1] = "alpha"
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, est / se, np.nan)
    return names, est, se, t


def fit_fixed(data: Dataset, spec: ModelSpec) -> FitResult:
    """Fit a Poisson or NB2 model under form 1, 2 or 3."""
    if spec.form not in (1, 2, 3):
        raise SpecError(f"fit_fixed handles forms 1-3, got form {spec.form}")
    design = build_design(data, spec)
    return fit_fixed_design(design, spec)


def fit_fixed_design(design: DesignMatrix, spec: ModelSpec) -> FitResult:
    opt, cov = fit_design(design, spec.family, spec.tol, spec.max_iter)
    params = FixedParams.from_vector(opt.x, spec.family)
    raw_names = list(design.fixed_names) + (["ln_alpha"] if spec.family == "nb" else [])
    names, est, se, t = summarize(raw_names, opt.x, cov, spec.family)
    if spec.form == 1:
        ll_null = opt.value
    else:
        ll_null = _null_from_design(design, spec, spec.tol, spec.max_iter)
    return FitResult(
        spec=spec,
        params=params,
        names=names,
        estimates=est,
        std_errors=se,
        t_stats=t,
        loglik_convergence=opt.value,
        loglik_null=ll_null,
        n_obs=design.n_obs,
        n_params=opt.x.size,
        n_params_null=2 if spec.family == "nb" else 1,
        converged=opt.converged,
        iterations=opt.iterations,
        gradient_max=opt.gradient_max,
        covariance=cov,
        message=opt.message if cov is not None else opt.message + "; Hessian not invertible",
    )


@dataclass(frozen=True)
class LRTestResult:
    __test__ = False
    statistic: float
    p_value: float
    df: int
    prefer: str | None = None


def lr_test(ll_restricted: float, ll_full: float, df: int) -> LRTestResult:
    """Likelihood-ratio test, statistic ``2 (ll_full - ll_restricted)`` against chi2(df)."""
    if df < 1:
        raise ArgumentError(f"df must be >= 1, got {df}")
    stat = 2.0 * (ll_full - ll_restricted)
    if stat < -2e-9:
        raise ArgumentError(f"full model log-likelihood {ll_full} is below restricted {ll_restricted}")
    stat = max(stat, 0.0)
    return LRTestResult(stat, float(chi2.sf(stat, df)), df)


def overdispersion_lr(ll_poisson: float, ll_nb: float, level: float = 0.05) -> LRTestResult:
    """Boundary-corrected LR test of alpha = 0: ``p = P(chi2_1 > stat) / 2``."""
    stat = 2.0 * (ll_nb - ll_poisson)
    if stat < -2e-6:
        raise ArgumentError(f"NB log-likelihood {ll_nb} is below the nested Poisson {ll_poisson}")
    stat = max(stat, 0.0)
    p = 0.5 * float(chi2.sf(stat, 1))
    return LRTestResult(stat, p, 1, "nb" if p < level else "poisson")


def overdispersion_test(poisson_fit: FitResult, nb_fit: FitResult, level: float = 0.05) -> LRTestResult:
    if poisson_fit.spec.family != "poisson" or nb_fit.spec.family != "nb":
        raise ArgumentError("overdispersion_test expects a Poisson fit and an NB fit")
    a, b = poisson_fit.spec, nb_fit.spec
    if (a.form, a.covariates, a.random, a.response) != (b.form, b.covariates, b.random, b.response):
        raise ArgumentError("Poisson and NB fits use different mean structures")
    if poisson_fit.n_obs != nb_fit.n_obs:
        raise ArgumentError("Poisson and NB fits use different data")
    return overdispersion_lr(poisson_fit.loglik_convergence, nb_fit.loglik_convergence, level)
