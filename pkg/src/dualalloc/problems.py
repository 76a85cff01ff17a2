"""Concrete simulated allocation problems and policy evaluation helpers.

Three problem families share a common layout: the metric vector f stacks m
per-user rates with one trailing power-budget slack row, the utility is a
weighted sum of the rate rows, and channels fade i.i.d. exponentially with
rate 2 (mean 1/2) per scalar gain.

* AWGN: orthogonal point-to-point links, rate log(1 + h_i p_i / v_i), one
  scalar-input network per user.
* Interference MAC (continuous): a shared receiver, rate
  log(1 + h_i p_i / (v_i + sum_{j != i} h_j p_j)), a single network reading
  the whole channel vector.
* Interference pairs (binary): m transmitter/receiver pairs with a full
  m x m gain matrix, on/off decisions at fixed power p0, Bernoulli policy
  head over the flattened gain matrix.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .estimators import sample_policy
from .mlp import MlpArchitecture, PolicyModel, SisoBank
from .problem import ChannelSampler, ContractError, ProblemSpec
from .rng import named_stream

CHANNEL_RATE = 2.0
DEFAULT_SUPPORT = (0.0, 10.0)


def _per_user_params(m, value, name, low=None):
    arr = np.full(m, float(value)) if np.isscalar(value) else np.asarray(value, dtype=float)
    if arr.shape != (m,):
        raise ContractError(f"{name} must be scalar or length {m}")
    if low is not None and np.any(arr <= low):
        raise ContractError(f"{name} entries must exceed {low}")
    return arr


def draw_experiment_params(m, seed):
    """Per-user weights and noise powers, i.i.d. uniform on [0.5, 1.5]."""
    rng = named_stream(seed, "problem-params")
    w = rng.uniform(0.5, 1.5, size=m)
    v = rng.uniform(0.5, 1.5, size=m)
    return w, v


@dataclass(frozen=True)
class AwgnConfig:
    """Weighted sum-capacity over orthogonal AWGN links with an average power budget."""

    m: int
    w: object = 1.0
    v: object = 1.0
    p_max: float = 20.0
    support: tuple = DEFAULT_SUPPORT
    hidden: tuple = (8, 4)
    x_cap: float = 5.0

    def __post_init__(self):
        if self.m <= 0:
            raise ContractError("need at least one user")
        if self.p_max <= 0:
            raise ContractError("p_max must be positive")
        object.__setattr__(self, "w", _per_user_params(self.m, self.w, "w", low=0.0))
        object.__setattr__(self, "v", _per_user_params(self.m, self.v, "v", low=0.0))


@dataclass(frozen=True)
class InterferenceConfig:
    """Shared-medium variants: continuous power control or binary scheduling."""

    m: int
    mode: str = "continuous"
    w: object = 1.0
    v: object = 1.0
    p_max: float = 20.0
    p0: float = 10.0
    support: tuple = DEFAULT_SUPPORT
    hidden: tuple = (32, 16)
    x_cap: float = 5.0

    def __post_init__(self):
        if self.m <= 0:
            raise ContractError("need at least one user")
        if self.mode not in ("continuous", "binary"):
            raise ContractError(f"unknown interference mode {self.mode!r}")
        if self.p_max <= 0 or self.p0 <= 0:
            raise ContractError("powers must be positive")
        object.__setattr__(self, "w", _per_user_params(self.m, self.w, "w", low=0.0))
        object.__setattr__(self, "v", _per_user_params(self.m, self.v, "v", low=0.0))


def _weighted_sum(w, u):
    w_ext = np.append(w, 0.0)  # budget slack row carries no utility weight

    def g0(x):
        return np.asarray(x, dtype=float) @ w_ext

    return g0


def _stack_budget(rates, alloc, p_max):
    slack = p_max - alloc.sum(axis=-1, keepdims=True)
    return np.concatenate([rates, slack], axis=-1)


def build_awgn(cfg):
    """ProblemSpec plus a per-user SISO policy bank for the AWGN problem."""
    m, w, v = cfg.m, cfg.w, cfg.v

    def f(p, h):
        p = np.asarray(p, dtype=float)
        h = np.asarray(h, dtype=float)
        rates = np.log1p(h * p / v)
        return _stack_budget(rates, p, cfg.p_max)

    spec = ProblemSpec(
        n_channels=m,
        m_resources=m,
        u_metrics=m + 1,
        r_utilities=0,
        f=f,
        g0=_weighted_sum(w, m + 1),
        sampler=ChannelSampler(rate=CHANNEL_RATE, dim=m),
        x_lower=np.zeros(m + 1),
        x_upper=np.append(np.full(m, cfg.x_cap), 0.0),
        p_lower=np.full(m, cfg.support[0]),
        p_upper=np.full(m, cfg.support[1]),
        budget_row=m,
    )
    arch = MlpArchitecture(
        (1, *cfg.hidden, 2),
        ("relu",) * len(cfg.hidden) + ("identity",),
        "trunc-gauss",
    )
    model = SisoBank(arch, n_copies=m, support=cfg.support)
    return spec, model


def _mac_f(cfg):
    v = cfg.v

    def f(p, h):
        p = np.asarray(p, dtype=float)
        h = np.asarray(h, dtype=float)
        signal = h * p
        total = signal.sum(axis=-1, keepdims=True)
        rates = np.log1p(signal / (v + total - signal))
        return _stack_budget(rates, p, cfg.p_max)

    return f


def _binary_f(cfg):
    m, v, p0 = cfg.m, cfg.v, cfg.p0
    diag = np.arange(m)

    def f(alpha, h_flat):
        alpha = np.asarray(alpha, dtype=float)
        h_flat = np.asarray(h_flat, dtype=float)
        gains = h_flat.reshape(*h_flat.shape[:-1], m, m)
        # gains[..., j, i] is the power gain from transmitter j at receiver i
        direct = gains[..., diag, diag]
        incoming = p0 * np.einsum("...ji,...j->...i", gains, alpha)
        interference = incoming - p0 * direct * alpha
        rates = np.log1p(p0 * direct * alpha / (v + interference))
        # budget row counts active transmitters: E[sum alpha] <= p_max
        return _stack_budget(rates, alpha, cfg.p_max)

    return f


def build_interference(cfg):
    """ProblemSpec plus a single shared policy network for either mode."""
    m, w = cfg.m, cfg.w
    if cfg.mode == "continuous":
        n_in = m
        spec = ProblemSpec(
            n_channels=n_in,
            m_resources=m,
            u_metrics=m + 1,
            r_utilities=0,
            f=_mac_f(cfg),
            g0=_weighted_sum(w, m + 1),
            sampler=ChannelSampler(rate=CHANNEL_RATE, dim=n_in),
            x_lower=np.zeros(m + 1),
            x_upper=np.append(np.full(m, cfg.x_cap), 0.0),
            p_lower=np.full(m, cfg.support[0]),
            p_upper=np.full(m, cfg.support[1]),
            budget_row=m,
        )
        arch = MlpArchitecture(
            (n_in, *cfg.hidden, 2 * m),
            ("relu",) * len(cfg.hidden) + ("identity",),
            "trunc-gauss",
        )
        model = PolicyModel(arch, support=cfg.support)
        return spec, model

    n_in = m * m
    spec = ProblemSpec(
        n_channels=n_in,
        m_resources=m,
        u_metrics=m + 1,
        r_utilities=0,
        f=_binary_f(cfg),
        g0=_weighted_sum(w, m + 1),
        sampler=ChannelSampler(rate=CHANNEL_RATE, dim=n_in),
        x_lower=np.zeros(m + 1),
        x_upper=np.append(np.full(m, cfg.x_cap), 0.0),
        p_lower=np.zeros(m),
        p_upper=np.ones(m),
        binary_allocation=True,
        budget_row=m,
    )
    arch = MlpArchitecture(
        (n_in, *cfg.hidden, m),
        ("relu",) * len(cfg.hidden) + ("identity",),
        "bernoulli",
    )
    model = PolicyModel(arch, support=(0.0, 1.0))
    return spec, model


def sample_channels(problem, batch, rng):
    """Draw a (batch, n) channel matrix from the problem's sampler."""
    return problem.sampler.draw(batch, rng)


@dataclass
class EvalResult:
    """Monte Carlo summary of one policy on one problem."""

    objective: float
    expected_f: np.ndarray
    std_err: np.ndarray
    budget_residual: Optional[float]
    batch: int


def evaluate_policy(problem, policy, batch, seed):
    """Estimate E[f] and the realized utility g0(E[f]) for a batched policy.

    ``policy`` maps (channels (B, n), rng) -> allocations (B, m).
    """
    rng = named_stream(seed, "evaluation")
    h = problem.sampler.draw(batch, rng)
    p = np.asarray(policy(h, rng), dtype=float)
    values = np.asarray(problem.f(p, h), dtype=float)
    ef = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / np.sqrt(batch)
    budget = (
        float(ef[problem.budget_row]) if problem.budget_row is not None else None
    )
    return EvalResult(
        objective=float(problem.g0(ef)),
        expected_f=ef,
        std_err=se,
        budget_residual=budget,
        batch=batch,
    )


def stochastic_policy(model):
    """Policy closure that samples the model's output law."""

    def policy(h, rng):
        alloc, _ = sample_policy(model, h, rng)
        return alloc

    return policy


def mean_policy(model):
    """Deterministic policy closure allocating the head mean (continuous heads)."""
    from .mlp import mean_allocation_batch

    def policy(h, rng):
        return mean_allocation_batch(model, h)

    return policy
