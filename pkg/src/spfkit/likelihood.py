"""Poisson and NB2 log-likelihood kernels under a log link with offset.

The ``*_terms`` functions work elementwise on the linear predictor and
broadcast, so the simulated likelihood reuses them on (obs, draw) arrays.
Reductions over observations use a single ``np.sum`` over the full
per-observation array, which fixes the summation order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .data import DesignMatrix

#: Bound on |linear predictor|; exp(30) ~ 1e13 crashes is far beyond any real segment.
ETA_CAP = 30.0

#: Below this dispersion the NB2 kernel switches to its Poisson limit.
ALPHA_FLOOR = 1e-12

# Above this 1/alpha the gamma-function differences lose precision; sum them exactly.
_SERIES_SHAPE = 1e5


@dataclass(frozen=True)
class FixedParams:
    beta: np.ndarray
    ln_alpha: float | None = None

    @property
    def alpha(self) -> float | None:
        return None if self.ln_alpha is None else float(np.exp(self.ln_alpha))

    def to_vector(self) -> np.ndarray:
        beta = np.asarray(self.beta, dtype=float)
        return beta.copy() if self.ln_alpha is None else np.append(beta, self.ln_alpha)

    @classmethod
    def from_vector(cls, vec, family: str) -> "FixedParams":
        vec = np.asarray(vec, dtype=float)
        if family == "nb":
            return cls(vec[:-1].copy(), float(vec[-1]))
        return cls(vec.copy(), None)


@dataclass(frozen=True)
class LikelihoodValue:
    loglik: float
    gradient: np.ndarray
    per_obs_loglik: np.ndarray
    capped: bool = False


def cap_eta(eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clip the linear predictor to ``[-ETA_CAP, ETA_CAP]``; return (eta, mask of clipped)."""
    mask = np.abs(eta) > ETA_CAP
    if mask.any():
        eta = np.clip(eta, -ETA_CAP, ETA_CAP)
    return eta, mask


def rowdot(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Row-wise products summed in numpy rather than BLAS gemv: the result for a
    # row does not depend on how many rows are in the block.
    return (x * b).sum(axis=-1) if x.shape[-1] else np.zeros(x.shape[:-1])


def linear_predictor(design: DesignMatrix, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (design.fixed.shape[1],):
        raise ValueError(f"beta has shape {beta.shape}, design has {design.fixed.shape[1]} fixed columns")
    return design.offset + rowdot(design.fixed, beta)


def poisson_mean(design: DesignMatrix, beta) -> np.ndarray:
    """Expected counts ``exp(offset + X beta)``; the predictor is capped at +-30."""
    eta, mask = cap_eta(linear_predictor(design, beta))
    if mask.any():
        warnings.warn(f"linear predictor capped at +-{ETA_CAP} for {int(mask.sum())} observation(s)", stacklevel=2)
    return np.exp(eta)


def poisson_terms(y, eta):
    """Per-element Poisson log-pmf and its derivative in the linear predictor."""
    eta, mask = cap_eta(eta)
    mu = np.exp(eta)
    ll = y * eta - mu - gammaln(y + 1.0)
    d_eta = np.where(mask, 0.0, y - mu)
    return ll, d_eta


def _shape_series(y, shape, fn):
    # sum_{j < y} fn(j) with y integer-valued, elementwise.
    y = np.asarray(y)
    out = np.zeros(np.broadcast(y, shape).shape)
    top = int(np.max(y)) if y.size else 0
    for j in range(top):
        out += np.where(j < y, fn(j), 0.0)
    return out


def nb_terms(y, eta, ln_alpha: float):
    """NB2 log-pmf with mean exp(eta) and variance mu + alpha mu^2.

    Returns ``(ll, d ll / d eta, d ll / d ln_alpha)``. For alpha below
    ``ALPHA_FLOOR`` the Poisson limit is used together with the leading-order
    dispersion derivative ``alpha * ((y - mu)^2 - y) / 2``.
    """
    eta, mask = cap_eta(eta)
    mu = np.exp(eta)
    alpha = float(np.exp(ln_alpha))
    if alpha < ALPHA_FLOOR:
        ll = y * eta - mu - gammaln(y + 1.0)
        d_eta = np.where(mask, 0.0, y - mu)
        d_lna = 0.5 * alpha * ((y - mu) ** 2 - y)
        return ll, d_eta, d_lna
    shape = 1.0 / alpha
    if shape > _SERIES_SHAPE:
        lg_ratio = y * np.log(shape) + _shape_series(y, eta, lambda j: np.log1p(j / shape))
        psi_diff = _shape_series(y, eta, lambda j: 1.0 / (shape + j))
    else:
        lg_ratio = gammaln(y + shape) - gammaln(shape)
        psi_diff = digamma(y + shape) - digamma(shape)
    l1p = np.log1p(mu / shape)
    ll = lg_ratio - gammaln(y + 1.0) - (shape + y) * l1p + y * (eta - np.log(shape))
    d_eta = np.where(mask, 0.0, shape * (y - mu) / (shape + mu))
    d_shape = psi_diff - l1p + (mu - y) / (shape + mu)
    d_lna = -shape * d_shape
    return ll, d_eta, d_lna


def poisson_loglik(design: DesignMatrix, beta) -> LikelihoodValue:
    eta = linear_predictor(design, beta)
    ll, d_eta = poisson_terms(design.response, eta)
    grad = (design.fixed * d_eta[:, None]).sum(axis=0)
    return LikelihoodValue(float(np.sum(ll)), grad, ll, bool(np.any(np.abs(eta) > ETA_CAP)))


def nb_loglik(design: DesignMatrix, beta, ln_alpha: float) -> LikelihoodValue:
    """NB2 log-likelihood; gradient layout is ``[beta..., ln_alpha]``."""
    eta = linear_predictor(design, beta)
    ll, d_eta, d_lna = nb_terms(design.response, eta, ln_alpha)
    grad = np.append((design.fixed * d_eta[:, None]).sum(axis=0), np.sum(d_lna))
    return LikelihoodValue(float(np.sum(ll)), grad, ll, bool(np.any(np.abs(eta) > ETA_CAP)))


def fixed_loglik(design: DesignMatrix, params: FixedParams) -> LikelihoodValue:
    if params.ln_alpha is None:
        return poisson_loglik(design, params.beta)
    return nb_loglik(design, params.beta, params.ln_alpha)
