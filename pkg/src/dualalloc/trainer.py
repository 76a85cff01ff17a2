"""Stochastic primal-dual training loop over parameterized allocation policies.

Each iteration performs four updates in order, all from sampled observations
of f, g0, and g (never their analytic gradients):

1. ascend theta along an estimate of d(lam . E[f])/d(theta) through ADAM;
2. ascend x along estimated d(g0)/dx + d(g)/dx mu - lam, projected onto X;
3. descend lam along E[f] - x measured at the *new* theta and x on a fresh
   channel batch, projected onto the nonnegative orthant;
4. descend mu along g(x) at the new x, same projection.

Dual step sizes decay exponentially with the iteration count; the primal
steps keep their initial rates. Given one seed the whole trajectory is
bit-for-bit reproducible.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .estimators import (
    FdConfig,
    fd_grad_g0,
    fd_jacobian_g,
    fd_policy_jacobian,
    policy_gradient,
    sample_policy,
)
from .mlp import mean_allocation_batch
from .problem import ContractError, DualIterates, project_box, project_nonneg
from .rng import spawn_streams

ESTIMATOR_KINDS = ("policy-gradient", "finite-difference")
STREAM_NAMES = ("channel", "init", "perturbation", "policy-sampling")


@dataclass(frozen=True)
class TrainerConfig:
    iters: int
    lr_theta: float = 5e-4
    lr_x: float = 5e-4
    lr_lambda: float = 5e-4
    lr_mu: float = 5e-4
    dual_decay: float = 0.9997
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 32
    estimator_kind: str = "policy-gradient"
    seed: int = 0
    fd: FdConfig = field(default_factory=FdConfig)

    def __post_init__(self):
        if self.iters < 0:
            raise ContractError("iters must be nonnegative")
        if self.estimator_kind not in ESTIMATOR_KINDS:
            raise ContractError(f"unknown estimator kind {self.estimator_kind!r}")
        if not 0.0 < self.dual_decay <= 1.0:
            raise ContractError("dual_decay must lie in (0, 1]")
        if self.batch <= 0:
            raise ContractError("batch must be positive")


@dataclass
class TrainerState:
    theta: np.ndarray
    x: np.ndarray
    duals: DualIterates
    adam_m: np.ndarray
    adam_v: np.ndarray
    k: int = 0


@dataclass
class MetricRecord:
    """One iteration's scalar summary, serialized to metrics.jsonl by the CLI.

    ``wall_ms`` is measured timing and deliberately excluded from the
    serialized metric log so that repeated runs are byte-identical.
    """

    iter: int
    objective_g0x: float
    realized_utility: float
    constraint_residual_norm: float
    power_residual: float | None
    lambda_norm: float
    mu_norm: float
    wall_ms: float | None = None


class TrainerDivergence(RuntimeError):
    """Non-finite iterate encountered; carries the last metric record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


def adam_direction(grad, m, v, t, cfg):
    """ADAM step direction for update index t >= 1; returns (direction, m, v)."""
    if t < 1:
        raise ContractError("adam update index starts at 1")
    grad = np.asarray(grad, dtype=float)
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad * grad
    m_hat = m / (1.0 - cfg.adam_beta1**t)
    v_hat = v / (1.0 - cfg.adam_beta2**t)
    direction = cfg.lr_theta * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return direction, m, v


def dual_step_size(lr, decay, k):
    """Exponentially decayed dual rate at iteration k (k = 0 gives lr)."""
    return lr * decay**k


class _PolicyGradientEngine:
    """theta ascent via likelihood ratios; E[f] observed on sampled allocations."""

    def theta_grad(self, problem, model, lam, cfg, streams):
        return policy_gradient(
            problem.f, model, lam, cfg.batch, problem.sampler,
            streams["policy-sampling"],
        )

    def expected_f(self, problem, model, cfg, streams):
        h = problem.sampler.draw(cfg.batch, streams["channel"])
        alloc, _ = sample_policy(model, h, streams["policy-sampling"])
        return np.asarray(problem.f(alloc, h), dtype=float).mean(axis=0)


class _FiniteDifferenceEngine:
    """theta ascent via parameter perturbations of the deterministic policy."""

    def theta_grad(self, problem, model, lam, cfg, streams):
        jac = fd_policy_jacobian(
            problem.f, model, replace(cfg.fd, batch=cfg.batch), problem.sampler,
            streams["perturbation"],
        )
        return jac @ lam

    def expected_f(self, problem, model, cfg, streams):
        h = problem.sampler.draw(cfg.batch, streams["channel"])
        alloc = mean_allocation_batch(model, h)
        return np.asarray(problem.f(alloc, h), dtype=float).mean(axis=0)


def _make_engine(kind):
    if kind == "policy-gradient":
        return _PolicyGradientEngine()
    return _FiniteDifferenceEngine()


def step(state, problem, model, cfg, streams, engine=None):
    """One primal-dual iteration; returns (new_state, MetricRecord)."""
    if engine is None:
        engine = _make_engine(cfg.estimator_kind)
    k = state.k
    fd_cfg = replace(cfg.fd, batch=cfg.batch)

    # theta ascent with the old multipliers
    model.theta = state.theta
    grad_theta = engine.theta_grad(problem, model, state.duals.lam, cfg, streams)
    direction, adam_m, adam_v = adam_direction(
        grad_theta, state.adam_m, state.adam_v, k + 1, cfg
    )
    theta_new = state.theta + direction
    model.theta = theta_new

    # x ascent along estimated utility gradients minus the ergodic price
    drift = fd_grad_g0(problem.g0, state.x, fd_cfg, streams["perturbation"])
    if problem.r_utilities > 0:
        jac = fd_jacobian_g(problem.g, state.x, fd_cfg, streams["perturbation"])
        drift = drift + jac @ state.duals.mu
    x_new = project_box(
        state.x + cfg.lr_x * (drift - state.duals.lam),
        problem.x_lower,
        problem.x_upper,
    )

    # dual descent on a fresh batch at the new iterates
    ef = engine.expected_f(problem, model, cfg, streams)
    residual = ef - x_new
    lam_new = project_nonneg(
        state.duals.lam - dual_step_size(cfg.lr_lambda, cfg.dual_decay, k) * residual
    )
    if problem.r_utilities > 0:
        g_val = np.asarray(problem.g(x_new), dtype=float)
        mu_new = project_nonneg(
            state.duals.mu - dual_step_size(cfg.lr_mu, cfg.dual_decay, k) * g_val
        )
    else:
        mu_new = state.duals.mu

    record = MetricRecord(
        iter=k,
        objective_g0x=float(problem.g0(x_new)),
        realized_utility=float(problem.g0(ef)),
        constraint_residual_norm=float(np.linalg.norm(residual)),
        power_residual=(
            float(residual[problem.budget_row]) if problem.budget_row is not None else None
        ),
        lambda_norm=float(np.abs(lam_new).sum()),
        mu_norm=float(np.abs(mu_new).sum()),
    )
    new_state = TrainerState(
        theta=theta_new,
        x=x_new,
        duals=DualIterates(lam_new, mu_new),
        adam_m=adam_m,
        adam_v=adam_v,
        k=k + 1,
    )
    for name, value in (
        ("theta", theta_new), ("x", x_new), ("lambda", lam_new),
        ("mu", mu_new), ("expected f", ef),
    ):
        if not np.all(np.isfinite(value)):
            raise TrainerDivergence(f"non-finite {name} at iteration {k}", record)
    return new_state, record


def initial_state(problem, model, cfg):
    """Fresh-start iterates: random theta, x at the box midpoint, unit duals."""
    streams = spawn_streams(cfg.seed, *STREAM_NAMES)
    model.init_theta(streams["init"])
    state = TrainerState(
        theta=model.theta,
        x=problem.x_midpoint.copy(),
        duals=DualIterates(
            np.ones(problem.u_metrics), np.ones(problem.r_utilities)
        ),
        adam_m=np.zeros(model.n_params),
        adam_v=np.zeros(model.n_params),
        k=0,
    )
    return state, streams


def train(problem, model, cfg, metric_sink=None, engine=None):
    """Run cfg.iters primal-dual steps from a fresh start.

    Returns (final_state, records). ``metric_sink`` is called with each
    MetricRecord as it is produced (used by the CLI to stream the log).
    """
    if model.n_inputs != problem.n_channels:
        raise ContractError("model input width must match the channel dimension")
    state, streams = initial_state(problem, model, cfg)
    if engine is None:
        engine = _make_engine(cfg.estimator_kind)
    records = []
    for _ in range(cfg.iters):
        tic = time.perf_counter()
        state, record = step(state, problem, model, cfg, streams, engine)
        record.wall_ms = (time.perf_counter() - tic) * 1e3
        records.append(record)
        if metric_sink is not None:
            metric_sink(record)
    return state, records
