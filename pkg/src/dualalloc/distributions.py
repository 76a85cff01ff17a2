"""Policy sampling laws: truncated Gaussian allocations and Bernoulli scheduling.

The truncated Gaussian is parameterized by per-component mean/stddev and a
shared support interval [a, b]. Sampling inverts the CDF: a Gaussian
quantile seed is polished by safeguarded Newton/bisection until the CDF
residual is below 1e-12, which keeps the draw count per seed deterministic
(no rejection loops). Log-densities and scores include the truncation
normalizer, so REINFORCE-style gradients are exact.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .problem import ContractError

_LOG_2PI = float(np.log(2.0 * np.pi))
_CDF_TOL = 1e-12


class SupportError(ContractError):
    """Raised when a sample lies outside the distribution support."""


def _std_pdf(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class TruncGaussParams:
    """Mean/stddev arrays (..., m) plus the shared support [lower, upper]."""

    mu: np.ndarray
    sigma: np.ndarray
    lower: float
    upper: float

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        if not self.upper > self.lower:
            raise ContractError("support upper bound must exceed the lower bound")
        if self.mu.shape != self.sigma.shape:
            raise ContractError("mu and sigma must share a shape")
        if np.any(self.sigma <= 0):
            raise ContractError("sigma must be positive")
        if np.any(self.mu < self.lower) or np.any(self.mu > self.upper):
            raise ContractError("mu must lie inside the support")


@dataclass(frozen=True)
class BernoulliParams:
    """Per-component on-probabilities in the open interval (0, 1)."""

    prob: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "prob", np.asarray(self.prob, dtype=float))
        if np.any(self.prob <= 0.0) or np.any(self.prob >= 1.0):
            raise ContractError("probabilities must lie strictly inside (0, 1)")


def _standardized(params, p=None):
    alpha = (params.lower - params.mu) / params.sigma
    beta = (params.upper - params.mu) / params.sigma
    norm = ndtr(beta) - ndtr(alpha)
    if p is None:
        return alpha, beta, norm
    xi = (np.asarray(p, dtype=float) - params.mu) / params.sigma
    return alpha, beta, norm, xi


def sample_trunc_gauss(params, rng):
    """One draw per (mu, sigma) entry via inverse-CDF with Newton polish."""
    alpha, beta, norm = _standardized(params)
    target = ndtr(alpha) + rng.random(params.mu.shape) * norm
    lo = np.broadcast_to(alpha, target.shape).copy()
    hi = np.broadcast_to(beta, target.shape).copy()
    x = np.clip(ndtri(target), lo, hi)
    for _ in range(8):
        resid = ndtr(x) - target
        if np.max(np.abs(resid)) < _CDF_TOL:
            break
        hi = np.where(resid > 0, x, hi)
        lo = np.where(resid <= 0, x, lo)
        density = np.maximum(_std_pdf(x), 1e-300)
        newton = x - resid / density
        inside = (newton > lo) & (newton < hi) & np.isfinite(newton)
        x = np.where(inside, newton, 0.5 * (lo + hi))
    return np.clip(params.mu + params.sigma * x, params.lower, params.upper)


def _check_in_support(params, p):
    p = np.asarray(p, dtype=float)
    if p.shape != params.mu.shape:
        raise ContractError("sample shape must match the parameter shape")
    if np.any(p < params.lower) or np.any(p > params.upper):
        raise SupportError("sample outside the truncated support")
    return p


def log_pdf_trunc_gauss(params, p):
    """Joint log-density over components, summed along the last axis."""
    p = _check_in_support(params, p)
    alpha, beta, norm, xi = _standardized(params, p)
    per_comp = (
        -np.log(params.sigma)
        - 0.5 * xi * xi
        - 0.5 * _LOG_2PI
        - np.log(norm)
    )
    return per_comp.sum(axis=-1)


def score_trunc_gauss(params, p):
    """Gradients of log_pdf w.r.t. (mu, sigma), including truncation terms."""
    p = _check_in_support(params, p)
    alpha, beta, norm, xi = _standardized(params, p)
    pdf_a = _std_pdf(alpha)
    pdf_b = _std_pdf(beta)
    d_mu = xi / params.sigma + (pdf_b - pdf_a) / (params.sigma * norm)
    d_sigma = (xi * xi - 1.0) / params.sigma + (beta * pdf_b - alpha * pdf_a) / (
        params.sigma * norm
    )
    return d_mu, d_sigma


def sample_bernoulli(params, rng):
    """0/1 draws, one per probability entry."""
    return (rng.random(params.prob.shape) < params.prob).astype(float)


def _check_binary(params, alpha):
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != params.prob.shape:
        raise ContractError("sample shape must match the parameter shape")
    if not np.all((alpha == 0.0) | (alpha == 1.0)):
        raise SupportError("bernoulli samples must be 0 or 1")
    return alpha


def log_pmf_bernoulli(params, alpha):
    alpha = _check_binary(params, alpha)
    per_comp = alpha * np.log(params.prob) + (1.0 - alpha) * np.log1p(-params.prob)
    return per_comp.sum(axis=-1)


def score_bernoulli(params, alpha):
    """Gradient of log_pmf w.r.t. the on-probabilities."""
    alpha = _check_binary(params, alpha)
    return alpha / params.prob - (1.0 - alpha) / (1.0 - params.prob)


def split_interleaved(out):
    """Split a trunc-gauss head output [mu1, s1, mu2, s2, ...] into (mu, sigma)."""
    out = np.asarray(out, dtype=float)
    return out[..., 0::2], out[..., 1::2]


def interleave(mu_part, sigma_part):
    """Inverse of split_interleaved, used to route gradients back to the head."""
    mu_part = np.asarray(mu_part, dtype=float)
    out = np.empty(mu_part.shape[:-1] + (2 * mu_part.shape[-1],), dtype=float)
    out[..., 0::2] = mu_part
    out[..., 1::2] = sigma_part
    return out
