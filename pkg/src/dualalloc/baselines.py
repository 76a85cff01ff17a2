"""Reference allocation strategies to benchmark learned policies against.

The AWGN problem admits an exact solution by dual decomposition: for fixed
multipliers the per-channel maximizer is a clamped waterfilling formula, so
a plain dual stochastic subgradient iteration converges to the optimum.
The interference problems have no tractable exact solution; the standard
comparisons are fixed/random power heuristics and per-realization WMMSE.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .problem import ContractError
from .rng import named_stream


def waterfill_allocation(lam, mu_pow, v, h, cap):
    """Pointwise maximizer of lam_i log(1 + h_i p / v_i) - mu_pow p on [0, cap]."""
    lam = np.asarray(lam, dtype=float)
    h = np.asarray(h, dtype=float)
    if mu_pow > 0.0:
        level = lam / mu_pow
    else:
        # free power: saturate every user with positive rate weight
        level = np.where(lam > 0.0, np.inf, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = level - v / h
    return np.clip(np.nan_to_num(raw, nan=0.0, posinf=cap), 0.0, cap)


@dataclass
class AwgnDualResult:
    """Converged multipliers and the induced waterfilling policy."""

    lam: np.ndarray
    mu_pow: float
    objective: float
    expected_power: float
    expected_rates: np.ndarray

    def policy(self, cfg):
        lam, mu_pow = self.lam, self.mu_pow

        def allocate(h, rng=None):
            return waterfill_allocation(lam, mu_pow, cfg.v, h, cfg.support[1])

        return allocate


def exact_awgn_dual_sgd(
    cfg,
    iters=30000,
    batch=32,
    lr0=0.1,
    seed=0,
    eval_batch=200000,
):
    """Solve the unparameterized AWGN problem by dual stochastic subgradient.

    Rate multipliers and the power price take 1/sqrt(k) steps; the reported
    multipliers average the final 10% of iterates and the objective is a
    Monte Carlo evaluation of the induced waterfilling policy.
    """
    m, w, v = cfg.m, cfg.w, cfg.v
    rng = named_stream(seed, "awgn-dual-sgd")
    lam = np.ones(m)
    mu_pow = 1.0
    x_cap = cfg.x_cap
    tail_start = iters - max(1, iters // 10)
    lam_acc = np.zeros(m)
    mu_acc = 0.0
    tail_count = 0
    for k in range(1, iters + 1):
        h = rng.exponential(scale=0.5, size=(batch, m))
        p = waterfill_allocation(lam, mu_pow, v, h, cfg.support[1])
        rates = np.log1p(h * p / v).mean(axis=0)
        # maximizing (w - lam) . x over the box is bang-bang per component
        x = np.where(w > lam, x_cap, 0.0)
        step = lr0 / np.sqrt(k)
        lam = np.maximum(lam - step * (rates - x), 0.0)
        mu_pow = max(mu_pow - step * (cfg.p_max - p.sum(axis=1).mean()), 0.0)
        if k > tail_start:
            lam_acc += lam
            mu_acc += mu_pow
            tail_count += 1
    lam_bar = lam_acc / tail_count
    mu_bar = mu_acc / tail_count

    h = named_stream(seed, "awgn-dual-eval").exponential(
        scale=0.5, size=(eval_batch, m)
    )
    p = waterfill_allocation(lam_bar, mu_bar, v, h, cfg.support[1])
    rates = np.log1p(h * p / v).mean(axis=0)
    return AwgnDualResult(
        lam=lam_bar,
        mu_pow=mu_bar,
        objective=float(w @ rates),
        expected_power=float(p.sum(axis=1).mean()),
        expected_rates=rates,
    )


def equal_power_policy(m, p_max):
    """Constant allocation p_max / m for every user and channel draw."""
    level = p_max / m

    def allocate(h, rng=None):
        h = np.asarray(h, dtype=float)
        return np.full(h.shape[:-1] + (m,), level)

    return allocate


def random_k_policy(m, k, power):
    """Each draw activates a uniformly random k-subset at the given power."""
    if not 0 < k <= m:
        raise ContractError("k must lie in 1..m")

    def allocate(h, rng):
        h = np.asarray(h, dtype=float)
        batch = h.shape[0]
        alloc = np.zeros((batch, m))
        scores = rng.random((batch, m))
        chosen = np.argpartition(scores, k - 1, axis=1)[:, :k]
        np.put_along_axis(alloc, chosen, power, axis=1)
        return alloc

    return allocate


def random_k_binary_policy(m, k):
    """random_k_policy variant emitting 0/1 decisions for binary problems."""
    return random_k_policy(m, k, 1.0)


def _wmmse_descend(gains, noises, weights, p0, v_amp, max_iter, tol):
    m = gains.shape[1]
    amp = np.sqrt(gains)
    diag = np.arange(m)
    a_direct = amp[:, diag, diag]

    def sum_rate(v):
        power = v * v
        received = np.einsum("bji,bj->bi", gains, power)
        direct = gains[:, diag, diag] * power
        sinr = direct / (noises + received - direct)
        return np.log1p(sinr) @ weights

    trace = [sum_rate(v_amp)]
    for _ in range(max_iter):
        total_rx = noises + np.einsum("bji,bj->bi", gains, v_amp * v_amp)
        u = a_direct * v_amp / total_rx
        mse = 1.0 - u * a_direct * v_amp
        w_mse = 1.0 / mse
        coeff = weights * w_mse * u * u
        denom = np.einsum("bij,bj->bi", gains, coeff)
        num = weights * w_mse * u * a_direct
        v_new = np.zeros_like(v_amp)
        np.divide(num, denom, out=v_new, where=denom > 0.0)
        v_amp = np.clip(v_new, 0.0, np.sqrt(p0))
        trace.append(sum_rate(v_amp))
        if np.max(trace[-1] - trace[-2]) < tol:
            break
    else:
        warnings.warn("wmmse did not reach tolerance within max_iter")
    return v_amp, np.asarray(trace)


def wmmse_batch(gains, noises, weights, p0, max_iter=200, tol=1e-8):
    """WMMSE power control on a batch of interference networks.

    ``gains`` is (B, m, m) with gains[b, j, i] the power gain from
    transmitter j at receiver i. Returns (powers (B, m), weighted sum-rate
    trace (iters, B)). The trace tracks the full-power start and is
    nondecreasing across iterations. The block-coordinate updates only find
    local optima, and the symmetric full-power start cannot reach solutions
    that silence a user (zero power is a fixed point), so each single-user
    start is also descended and the best endpoint per network is returned.
    """
    gains = np.asarray(gains, dtype=float)
    if gains.ndim != 3 or gains.shape[1] != gains.shape[2]:
        raise ContractError("gains must be a (batch, m, m) array")
    m = gains.shape[1]
    noises = np.asarray(noises, dtype=float)
    weights = np.asarray(weights, dtype=float)
    diag = np.arange(m)

    def sum_rate(power):
        received = np.einsum("bji,bj->bi", gains, power)
        direct = gains[:, diag, diag] * power
        sinr = direct / (noises + received - direct)
        return np.log1p(sinr) @ weights

    v_full, trace = _wmmse_descend(
        gains, noises, weights, p0, np.full(gains.shape[:2], np.sqrt(p0)),
        max_iter, tol,
    )
    best_power = v_full * v_full
    best_value = sum_rate(best_power)
    for j in range(m):
        v0 = np.zeros(gains.shape[:2])
        v0[:, j] = np.sqrt(p0)
        v_j, _ = _wmmse_descend(gains, noises, weights, p0, v0, max_iter, tol)
        power_j = v_j * v_j
        value_j = sum_rate(power_j)
        improved = value_j > best_value
        best_power[improved] = power_j[improved]
        best_value = np.where(improved, value_j, best_value)
    return best_power, trace


def wmmse_solve(gains, noises, weights, p0, max_iter=200, tol=1e-8, return_trace=False):
    """Single-network wrapper around wmmse_batch; returns the power vector."""
    powers, trace = wmmse_batch(
        np.asarray(gains, dtype=float)[None], noises, weights, p0, max_iter, tol
    )
    if return_trace:
        return powers[0], trace[:, 0]
    return powers[0]


def mac_gain_matrix(h):
    """Shared-receiver gain matrix: every receiver sees transmitter j at gain h_j."""
    h = np.asarray(h, dtype=float)
    m = h.shape[-1]
    return np.repeat(h[..., :, None], m, axis=-1)


def wmmse_mac_policy(cfg):
    """Per-realization WMMSE power control for the continuous MAC problem."""

    def allocate(h, rng=None):
        powers, _ = wmmse_batch(
            mac_gain_matrix(h), cfg.v, cfg.w, cfg.support[1]
        )
        return powers

    return allocate


def wmmse_binary_reference_policy(cfg):
    """Continuous-power WMMSE reference for the binary scheduling problem.

    Solves each realization with per-user power cap p0 on the full gain
    matrix; the result is a continuous benchmark, not a feasible binary
    policy, so evaluate it with the continuous rate map.
    """

    def allocate(h_flat, rng=None):
        h_flat = np.asarray(h_flat, dtype=float)
        gains = h_flat.reshape(-1, cfg.m, cfg.m)
        powers, _ = wmmse_batch(gains, cfg.v, cfg.w, cfg.p0)
        return powers

    return allocate


def binary_reference_rates(cfg, h_flat, powers):
    """Rates achieved by continuous powers on the binary problem's network."""
    h_flat = np.asarray(h_flat, dtype=float)
    gains = h_flat.reshape(-1, cfg.m, cfg.m)
    diag = np.arange(cfg.m)
    received = np.einsum("bji,bj->bi", gains, powers)
    direct = gains[:, diag, diag] * powers
    return np.log1p(direct / (cfg.v + received - direct))
