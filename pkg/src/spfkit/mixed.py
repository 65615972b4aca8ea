"""Random-parameter Poisson / NB2 models by maximum simulated likelihood.

Each random coefficient is ``mu + sigma * z`` with ``z ~ N(0, 1)`` realised by
Halton draws. Draw assignment is fixed: dimension ``d`` uses the ``d``-th
prime, the first ``skip`` points of each sequence are discarded, and
observation ``i`` takes points ``i*R + 1 .. (i+1)*R`` of what remains.

Spreads are stored unconstrained and enter the likelihood as ``|sigma|``.
Parameter vector layout: ``[beta_fixed, mu_random, sigma_random, (ln_alpha)]``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Dataset, DesignMatrix, ModelSpec, build_design
from .errors import ArgumentError, DomainError, SpecError
from .likelihood import (
    ETA_CAP,
    FixedParams,
    LikelihoodValue,
    fixed_loglik,
    nb_terms,
    poisson_terms,
    rowdot,
)
from .optimize import (
    FitResult,
    _null_from_design,
    covariance_from_hessian,
    fit_design,
    maximize,
    numeric_hessian,
    summarize,
)

PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71)

DEFAULT_DRAWS = 200
DEFAULT_SKIP = 10

#: Spread t-statistic below which a random coefficient is reported as effectively fixed.
SIGMA_T_CRITICAL = 1.96

#: Spreads below this after a failed ascent are treated as sitting on the zero boundary.
SIGMA_BOUNDARY = 1e-3


# -- Halton points and normal quantiles -------------------------------------------


def halton(base: int, index: int) -> float:
    """Radical inverse of ``index`` (>= 1) in ``base``."""
    if index < 1:
        raise ArgumentError(f"Halton index must be >= 1, got {index}")
    if base < 2 or any(base % p == 0 for p in range(2, int(math.isqrt(base)) + 1)):
        raise ArgumentError(f"Halton base must be a prime >= 2, got {base}")
    num, den = 0, 1
    while index > 0:
        index, digit = divmod(index, base)
        num = num * base + digit
        den *= base
    return num / den


def halton_sequence(base: int, start: int, count: int) -> np.ndarray:
    """Halton points for indices ``start .. start + count - 1``, vectorised.

    Digits are accumulated as exact integers and divided once, so the values
    are bitwise equal to :func:`halton`.
    """
    if start < 1:
        raise ArgumentError(f"Halton index must be >= 1, got {start}")
    idx = np.arange(start, start + count, dtype=np.int64)
    num = np.zeros(count, dtype=np.int64)
    den = np.ones(count, dtype=np.int64)
    while np.any(idx > 0):
        live = idx > 0
        digit = idx % base
        num = np.where(live, num * base + digit, num)
        den = np.where(live, den * base, den)
        idx //= base
    return num / den


# Wichura (1988), Algorithm AS 241 PPND16: relative accuracy about 1e-16.
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3, 1.3731693765509461125e4,
      4.5921953931549871457e4, 6.7265770927008700853e4, 3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4, 5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0, 3.64784832476320460504e0,
      1.27045825245236838258e0, 2.41780725177450611770e-1, 2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4, 1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0, 2.96560571828504891230e-1,
      2.65321895265761230930e-2, 1.24266094738807843860e-3, 2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7, 2.04426310338993978564e-15)


def _poly(coefs, x):
    acc = np.zeros_like(x) + coefs[-1]
    for c in coefs[-2::-1]:
        acc = acc * x + c
    return acc


def inv_normal_cdf(u):
    """Standard-normal quantile for ``0 < u < 1`` (scalar or array)."""
    arr = np.asarray(u, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise DomainError("inv_normal_cdf requires 0 < u < 1")
    q = arr - 0.5
    out = np.empty_like(arr)
    central = np.abs(q) <= 0.425
    if np.any(central):
        qc = q[central]
        r = 0.180625 - qc * qc
        out[central] = qc * _poly(_A, r) / _poly(_B, r)
    tail = ~central
    if np.any(tail):
        qt = q[tail]
        r = np.sqrt(-np.log(np.where(qt < 0, arr[tail], 1.0 - arr[tail])))
        val = np.empty_like(r)
        near = r <= 5.0
        rn = r[near] - 1.6
        val[near] = _poly(_C, rn) / _poly(_D, rn)
        rf = r[~near] - 5.0
        val[~near] = _poly(_E, rf) / _poly(_F, rf)
        out[tail] = np.where(qt < 0, -val, val)
    return float(out) if np.ndim(u) == 0 else out


@dataclass(frozen=True)
class DrawMatrix:
    draws: np.ndarray  # (n_obs, n_draws, n_dims) standard-normal deviates
    n_draws: int
    skip: int
    bases: tuple[int, ...]

    @property
    def n_obs(self) -> int:
        return self.draws.shape[0]

    @property
    def n_dims(self) -> int:
        return self.draws.shape[2]


def make_draws(n_obs: int, n_dims: int, n_draws: int = DEFAULT_DRAWS, skip: int = DEFAULT_SKIP) -> DrawMatrix:
    if n_draws < 1:
        raise ArgumentError("n_draws must be >= 1")
    if n_dims > len(PRIMES):
        raise ArgumentError(f"at most {len(PRIMES)} random dimensions supported, got {n_dims}")
    if n_obs < 0 or n_dims < 0 or skip < 0:
        raise ArgumentError("n_obs, n_dims and skip must be non-negative")
    out = np.empty((n_obs, n_draws, n_dims))
    for d in range(n_dims):
        u = halton_sequence(PRIMES[d], skip + 1, n_obs * n_draws)
        out[:, :, d] = inv_normal_cdf(u).reshape(n_obs, n_draws)
    return DrawMatrix(out, n_draws, skip, PRIMES[:n_dims])


# -- parameters and simulated likelihood ------------------------------------------


@dataclass(frozen=True)
class MixedParams:
    beta_fixed: np.ndarray
    mu_random: np.ndarray
    sigma_random: np.ndarray
    ln_alpha: float | None = None

    @property
    def alpha(self) -> float | None:
        return None if self.ln_alpha is None else float(np.exp(self.ln_alpha))

    @property
    def sigma(self) -> np.ndarray:
        return np.abs(np.asarray(self.sigma_random, dtype=float))

    def to_vector(self) -> np.ndarray:
        parts = [np.asarray(self.beta_fixed, float), np.asarray(self.mu_random, float),
                 np.asarray(self.sigma_random, float)]
        if self.ln_alpha is not None:
            parts.append(np.array([self.ln_alpha]))
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec, n_fixed: int, n_random: int, family: str) -> "MixedParams":
        vec = np.asarray(vec, dtype=float)
        p, q = n_fixed, n_random
        if vec.size != p + 2 * q + (family == "nb"):
            raise ArgumentError(f"parameter vector of length {vec.size} does not match layout p={p}, q={q}")
        ln_alpha = float(vec[-1]) if family == "nb" else None
        return cls(vec[:p].copy(), vec[p:p + q].copy(), vec[p + q:p + 2 * q].copy(), ln_alpha)

    def as_fixed(self) -> FixedParams:
        """Fixed-parameter equivalent with random coefficients at their means."""
        return FixedParams(np.concatenate([self.beta_fixed, self.mu_random]), self.ln_alpha)


def _chunk_terms(design: DesignMatrix, params: MixedParams, zeta: np.ndarray, rows: slice, family: str):
    """Per-observation simulated log-likelihood and gradient rows for a block of observations."""
    x = design.fixed[rows]
    z = design.random[rows]
    y = design.response[rows]
    base = design.offset[rows] + rowdot(x, params.beta_fixed)
    sign = np.sign(params.sigma_random)
    coef = params.mu_random + params.sigma * zeta  # (n, R, q)
    eta = base[:, None] + (z[:, None, :] * coef).sum(axis=-1)
    yy = y[:, None]
    if family == "nb":
        ll, d_eta, d_lna = nb_terms(yy, eta, params.ln_alpha)
    else:
        ll, d_eta = poisson_terms(yy, eta)
    top = ll.max(axis=1)
    w = np.exp(ll - top[:, None])
    total = w.sum(axis=1)
    per_obs = top + np.log(total) - math.log(zeta.shape[1])
    w /= total[:, None]
    wd = w * d_eta
    gbar = wd.sum(axis=1)
    pieces = [x * gbar[:, None], z * gbar[:, None], z * sign * (wd[:, :, None] * zeta).sum(axis=1)]
    if family == "nb":
        pieces.append((w * d_lna).sum(axis=1)[:, None])
    capped = bool(np.any(np.abs(eta) > ETA_CAP))
    return per_obs, np.concatenate(pieces, axis=1), capped


def _blocks(n: int, workers: int) -> list[slice]:
    k = max(1, min(workers, n))
    edges = np.linspace(0, n, k + 1).round().astype(int)
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def simulated_loglik(
    design: DesignMatrix, params: MixedParams, draws: DrawMatrix, family: str = "poisson", workers: int = 1
) -> LikelihoodValue:
    """Simulated log-likelihood and its analytic gradient.

    The per-observation probability is the draw average of conditional
    likelihoods, evaluated as log-sum-exp minus ln R. Observations may be
    split across ``workers`` threads; per-observation results are assembled
    in observation order and reduced with one sum, so the value does not
    depend on the worker count.
    """
    q = design.random.shape[1]
    if draws.n_dims != q or draws.n_obs != design.n_obs:
        raise SpecError(f"draw matrix {draws.draws.shape} does not match design (n={design.n_obs}, q={q})")
    if family not in ("poisson", "nb"):
        raise SpecError(f"unknown family {family!r}")
    if (family == "nb") != (params.ln_alpha is not None):
        raise SpecError("ln_alpha must be given exactly when family is 'nb'")
    blocks = _blocks(design.n_obs, workers)
    jobs = [(design, params, draws.draws[b], b, family) for b in blocks]
    if len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            parts = list(pool.map(lambda a: _chunk_terms(*a), jobs))
    else:
        parts = [_chunk_terms(*jobs[0])]
    per_obs = np.concatenate([p[0] for p in parts])
    grad_rows = np.concatenate([p[1] for p in parts], axis=0)
    return LikelihoodValue(
        float(np.sum(per_obs)), grad_rows.sum(axis=0), per_obs, any(p[2] for p in parts)
    )


# -- estimation --------------------------------------------------------------------------


def mixed_names(design: DesignMatrix, family: str) -> list[str]:
    names = list(design.fixed_names) + list(design.random_names)
    names += [f"sd({n})" for n in design.random_names]
    if family == "nb":
        names.append("ln_alpha")
    return names


def _form3_equivalent(design: DesignMatrix) -> DesignMatrix:
    return DesignMatrix(
        response=design.response,
        offset=design.offset,
        fixed_names=design.fixed_names + design.random_names,
        fixed=np.column_stack([design.fixed, design.random]),
        segment_ids=design.segment_ids,
    )


def _embed(full, idx, sub):
    out = np.array(full, dtype=float)
    out[idx] = sub
    return out


def initial_sigma(mu) -> np.ndarray:
    return np.maximum(0.1 * np.abs(np.asarray(mu, dtype=float)), 0.05)


def fit_random(data: Dataset, spec: ModelSpec, workers: int = 1) -> FitResult:
    """Random-parameter fit by maximum simulated likelihood (form 4).

    Starts from the fixed-parameter fit with the same columns; spreads start
    at ``0.1 |mu|`` (at least 0.05). Random coefficients whose spread
    t-statistic is below 1.96 are listed in ``effectively_fixed``.
    """
    if spec.form != 4:
        raise SpecError(f"fit_random requires form 4, got form {spec.form}")
    design = build_design(data, spec)
    return fit_random_design(design, spec, workers)


def fit_random_design(design: DesignMatrix, spec: ModelSpec, workers: int = 1) -> FitResult:
    p = design.fixed.shape[1]
    q = design.random.shape[1]
    family = spec.family
    start, _ = fit_design(_form3_equivalent(design), family, spec.tol, spec.max_iter)
    beta0 = start.x[:p]
    mu0 = start.x[p:p + q]
    x0 = np.concatenate([beta0, mu0, initial_sigma(mu0), start.x[p + q:]])

    if q == 0:
        # No mixing: the simulated likelihood is the fixed likelihood exactly.
        def objective(v):
            lv = fixed_loglik(design, FixedParams.from_vector(v, family))
            return lv.loglik, lv.gradient
    else:
        draws = make_draws(design.n_obs, q, spec.draws, spec.skip)

        def objective(v):
            lv = simulated_loglik(design, MixedParams.from_vector(v, p, q, family), draws, family, workers)
            return lv.loglik, lv.gradient

    opt = maximize(objective, x0, tol=spec.tol, max_iter=spec.max_iter)
    pinned: list[int] = []
    if not opt.converged and q:
        # A spread collapsing to zero sits on the kink of |sigma|; pin it there and
        # re-optimise the rest (the gradient in a pinned coordinate is exactly 0).
        pinned = [k for k in range(q) if abs(opt.x[p + q + k]) < SIGMA_BOUNDARY]
        if pinned:
            x1 = opt.x.copy()
            x1[[p + q + k for k in pinned]] = 0.0
            opt = maximize(objective, x1, tol=spec.tol, max_iter=spec.max_iter)
            opt.message += f"; spread(s) at boundary 0: {[design.random_names[k] for k in pinned]}"
    pinned_idx = {p + q + k for k in pinned}
    free = np.array([i for i in range(opt.x.size) if i not in pinned_idx], dtype=int)
    cov_free = covariance_from_hessian(
        numeric_hessian(lambda v: objective(_embed(opt.x, free, v))[1][free], opt.x[free])
    )
    cov = None
    if cov_free is not None:
        cov = np.full((opt.x.size, opt.x.size), np.nan)
        cov[np.ix_(free, free)] = cov_free
    params = MixedParams.from_vector(opt.x, p, q, family)
    sigma_slice = slice(p + q, p + 2 * q)
    names, est, se, t = summarize(mixed_names(design, family), opt.x, cov, family, sigma_slice)
    flagged = [design.random_names[k] for k in range(q) if not (abs(t[p + q + k]) >= SIGMA_T_CRITICAL)]
    ll_null = _null_from_design(design, spec, spec.tol, spec.max_iter)
    message = opt.message if cov is not None else opt.message + "; Hessian not invertible"
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
        n_params_null=2 if family == "nb" else 1,
        converged=opt.converged,
        iterations=opt.iterations,
        gradient_max=opt.gradient_max,
        covariance=cov,
        message=message,
        effectively_fixed=flagged,
        extras={"draws": spec.draws, "skip": spec.skip},
    )


def draw_count_diagnostic(fit: FitResult, data: Dataset, n_draws: int | None = None) -> dict:
    """Simulated log-likelihood at the fitted point under the fit's draw count and a larger one.

    Defaults to twice the fitted draw count.
    """
    spec = fit.spec
    n_draws = n_draws or 2 * spec.draws
    design = build_design(data, spec)
    q = design.random.shape[1]
    params = fit.params
    ll_fit = simulated_loglik(design, params, make_draws(design.n_obs, q, spec.draws, spec.skip), spec.family).loglik
    ll_more = simulated_loglik(design, params, make_draws(design.n_obs, q, n_draws, spec.skip), spec.family).loglik
    return {"draws": spec.draws, "loglik": ll_fit, "draws_alt": n_draws, "loglik_alt": ll_more,
            "abs_difference": abs(ll_fit - ll_more)}
