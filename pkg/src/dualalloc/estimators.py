"""Model-free gradient estimators built from observed function values.

Two families:

* finite differences with Gaussian direction probes, for gradients of the
  utilities g0, g in the ergodic variable x and of E[f] in the policy
  parameters theta;
* a likelihood-ratio (REINFORCE) estimator for stochastic policies, which
  never differences f at all.

Observers are plain callables evaluated on stacked inputs: ``g0_observer``
maps (B, u) -> (B,), ``g_observer`` maps (B, u) -> (B, r), and ``f_observer``
maps ((B, m), (B, n)) -> (B, u). They may be noisy; each batch row gets a
fresh perturbation. Jacobians are returned transposed (u x r and q x u) so
that ``jac @ mu`` and ``jac @ lam`` are the vectors the primal-dual updates
consume.
"""

from dataclasses import dataclass

import numpy as np

from .distributions import (
    BernoulliParams,
    TruncGaussParams,
    interleave,
    sample_bernoulli,
    sample_trunc_gauss,
    score_bernoulli,
    score_trunc_gauss,
    split_interleaved,
)
from .mlp import mean_allocation_batch, mean_allocation_batch_theta
from .problem import ContractError


@dataclass(frozen=True)
class FdConfig:
    """Step sizes for the three finite-difference probes and the batch size."""

    alpha1: float = 1e-2
    alpha2: float = 1e-2
    alpha3: float = 1e-2
    batch: int = 32

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) <= 0:
            raise ContractError("finite-difference steps must be positive")
        if self.batch <= 0:
            raise ContractError("estimator batch must be positive")


def fd_grad_g0(g0_observer, x0, cfg, rng):
    """Estimate the gradient of g0 at x0, shape (u,)."""
    x0 = np.asarray(x0, dtype=float)
    probes = rng.standard_normal((cfg.batch, x0.size))
    base = np.asarray(g0_observer(np.tile(x0, (cfg.batch, 1))), dtype=float)
    bumped = np.asarray(g0_observer(x0 + cfg.alpha1 * probes), dtype=float)
    slopes = (bumped - base) / cfg.alpha1
    return (slopes[:, None] * probes).mean(axis=0)


def fd_jacobian_g(g_observer, x0, cfg, rng):
    """Estimate the transposed Jacobian of g at x0, shape (u, r)."""
    x0 = np.asarray(x0, dtype=float)
    probes = rng.standard_normal((cfg.batch, x0.size))
    base = np.atleast_2d(np.asarray(g_observer(np.tile(x0, (cfg.batch, 1))), dtype=float))
    bumped = np.atleast_2d(np.asarray(g_observer(x0 + cfg.alpha3 * probes), dtype=float))
    slopes = (bumped - base) / cfg.alpha3
    return probes.T @ slopes / cfg.batch


def fd_policy_jacobian(f_observer, model, cfg, sampler, rng):
    """Estimate the transposed Jacobian of E[f(phi(h, theta), h)] in theta.

    Returns shape (q, u). The same channel draw is used for the nominal and
    the perturbed policy evaluation, so channel noise cancels in the
    difference.
    """
    h = sampler.draw(cfg.batch, rng)
    theta = model.theta
    probes = rng.standard_normal((cfg.batch, theta.size))
    base_alloc = mean_allocation_batch(model, h)
    bumped_alloc = mean_allocation_batch_theta(model, theta + cfg.alpha2 * probes, h)
    base = np.asarray(f_observer(base_alloc, h), dtype=float)
    bumped = np.asarray(f_observer(bumped_alloc, h), dtype=float)
    slopes = (bumped - base) / cfg.alpha2
    return probes.T @ slopes / cfg.batch


def policy_distribution(model, outputs):
    """Wrap head outputs in the matching sampling law."""
    if model.head == "trunc-gauss":
        mu, sigma = split_interleaved(outputs)
        return TruncGaussParams(mu, sigma, model.support[0], model.support[1])
    if model.head == "bernoulli":
        return BernoulliParams(outputs)
    raise ContractError("raw heads do not define a sampling law")


def sample_policy(model, h_batch, rng):
    """Draw allocations from the model's stochastic policy at each channel row."""
    params = policy_distribution(model, model.forward_batch(h_batch))
    if isinstance(params, TruncGaussParams):
        return sample_trunc_gauss(params, rng), params
    return sample_bernoulli(params, rng), params


def policy_gradient(f_observer, model, lam, batch, sampler, rng):
    """REINFORCE estimate of d(lam . E[f]) / d(theta), shape (q,).

    Averages (lam . f(p, h)) * d log pi(p | h, theta) / d theta over ``batch``
    channel draws with one sampled allocation each.
    """
    lam = np.asarray(lam, dtype=float)
    h = sampler.draw(batch, rng)
    alloc, params = sample_policy(model, h, rng)
    values = np.asarray(f_observer(alloc, h), dtype=float)
    rewards = values @ lam
    if isinstance(params, TruncGaussParams):
        d_mu, d_sigma = score_trunc_gauss(params, alloc)
        upstream = interleave(d_mu, d_sigma)
    else:
        upstream = score_bernoulli(params, alloc)
    return model.backward_batch(h, upstream * rewards[:, None]) / batch
