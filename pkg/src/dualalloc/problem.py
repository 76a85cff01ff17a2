"""Core problem objects for constrained ergodic resource allocation.

A problem couples a random channel state h with an allocation p produced by
a policy. Performance is measured by a vector f(p, h); the ergodic variables
x must satisfy x <= E[f(p(h), h)] componentwise, a concave utility g0(x) is
maximized, and optional extra utility constraints g(x) >= 0 may be imposed.
Everything downstream (estimators, trainer, verifiers) works against the
interfaces defined here.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .rng import named_stream


class ContractError(ValueError):
    """Raised when inputs violate a documented interface contract."""


def _as_vector(v, dim, name):
    arr = np.asarray(v, dtype=float)
    if arr.shape != (dim,):
        raise ContractError(f"{name} must have shape ({dim},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ChannelSampler:
    """I.i.d. channel-state distribution, one scalar fade per dimension.

    ``rate`` is the rate parameter of the exponential law (mean = 1/rate).
    """

    rate: float
    dim: int
    rng_seed: int = 0
    distribution_kind: str = "exponential-rate"

    def __post_init__(self):
        if self.rate <= 0:
            raise ContractError("channel rate must be positive")
        if self.dim <= 0:
            raise ContractError("channel dimension must be positive")
        if self.distribution_kind != "exponential-rate":
            raise ContractError(
                f"unknown channel distribution {self.distribution_kind!r}"
            )

    def draw(self, batch, rng=None):
        """(batch, dim) array of i.i.d. draws using ``rng`` or the built-in seed."""
        if rng is None:
            rng = named_stream(self.rng_seed, "channel")
        return rng.exponential(scale=1.0 / self.rate, size=(batch, self.dim))


@dataclass
class DualIterates:
    """Nonnegative multipliers for the ergodic (lam) and utility (mu) constraints."""

    lam: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        if np.any(self.lam < 0) or np.any(self.mu < 0):
            raise ContractError("dual iterates must be nonnegative")


@dataclass(frozen=True)
class ProblemSpec:
    """Dimensions, maps, and box constraints of one allocation problem.

    ``f`` maps (allocation, channel) -> u-vector and must accept arrays with
    leading batch axes. ``g0`` maps a u-vector (or batch thereof) to a scalar
    (or batch). ``g`` is optional and maps a u-vector to an r-vector; r = 0 is
    encoded as ``g=None``. ``budget_row`` optionally names the row of f that
    carries a power-budget slack, used only for reporting.
    """

    n_channels: int
    m_resources: int
    u_metrics: int
    r_utilities: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g0: Callable[[np.ndarray], np.ndarray]
    sampler: ChannelSampler
    x_lower: np.ndarray
    x_upper: np.ndarray
    p_lower: np.ndarray
    p_upper: np.ndarray
    g: Optional[Callable[[np.ndarray], np.ndarray]] = None
    binary_allocation: bool = False
    budget_row: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "x_lower", _as_vector(self.x_lower, self.u_metrics, "x_lower"))
        object.__setattr__(self, "x_upper", _as_vector(self.x_upper, self.u_metrics, "x_upper"))
        object.__setattr__(self, "p_lower", _as_vector(self.p_lower, self.m_resources, "p_lower"))
        object.__setattr__(self, "p_upper", _as_vector(self.p_upper, self.m_resources, "p_upper"))
        if np.any(self.x_lower > self.x_upper) or np.any(self.p_lower > self.p_upper):
            raise ContractError("box lower bounds must not exceed upper bounds")
        if self.r_utilities > 0 and self.g is None:
            raise ContractError("r_utilities > 0 requires a g map")
        if self.r_utilities == 0 and self.g is not None:
            raise ContractError("g map given but r_utilities == 0")
        if self.sampler.dim != self.n_channels:
            raise ContractError("sampler dimension must match n_channels")

    @property
    def x_midpoint(self):
        return 0.5 * (self.x_lower + self.x_upper)


def project_box(v, lower, upper):
    """Euclidean projection onto the box [lower, upper], componentwise clamp."""
    v = np.asarray(v, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(lower > upper):
        raise ContractError("empty box: lower > upper")
    return np.minimum(np.maximum(v, lower), upper)


def project_nonneg(v):
    """Euclidean projection onto the nonnegative orthant."""
    return np.maximum(np.asarray(v, dtype=float), 0.0)


def evaluate_lagrangian(problem, x, duals, ef_estimate):
    """Saddle function g0(x) + mu'g(x) + lam'(E[f] - x) at the given point.

    ``ef_estimate`` stands in for E[f(p(h), h)] and is typically a sample mean.
    """
    x = _as_vector(x, problem.u_metrics, "x")
    ef = _as_vector(ef_estimate, problem.u_metrics, "ef_estimate")
    lam = _as_vector(duals.lam, problem.u_metrics, "lam")
    mu = _as_vector(duals.mu, problem.r_utilities, "mu")
    value = float(problem.g0(x)) + float(lam @ (ef - x))
    if problem.r_utilities > 0:
        value += float(mu @ np.asarray(problem.g(x), dtype=float))
    return value


def check_allocation(problem, p):
    """Raise ContractError if an allocation batch leaves the feasible set P."""
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != problem.m_resources:
        raise ContractError(
            f"allocation must have {problem.m_resources} components, got {p.shape}"
        )
    if problem.binary_allocation:
        if not np.all((p == 0.0) | (p == 1.0)):
            raise ContractError("binary problem requires allocations in {0, 1}")
        return p
    tol = 1e-9
    if np.any(p < problem.p_lower - tol) or np.any(p > problem.p_upper + tol):
        raise ContractError("allocation outside the admissible box P")
    return p


def estimate_expected_f(problem, policy_eval, batch, seed):
    """Sample mean of f(policy(h), h) over ``batch`` i.i.d. channel draws.

    ``policy_eval`` maps a (batch, n) channel array to a (batch, m) allocation
    array. The reduction order is fixed, so the result is bit-identical for a
    given seed.
    """
    if batch <= 0:
        raise ContractError("batch must be positive")
    rng = named_stream(seed, "channel")
    h = problem.sampler.draw(batch, rng)
    p = check_allocation(problem, policy_eval(h))
    values = np.asarray(problem.f(p, h), dtype=float)
    if values.shape != (batch, problem.u_metrics):
        raise ContractError(
            f"f must return shape ({batch}, {problem.u_metrics}), got {values.shape}"
        )
    return values.mean(axis=0)
