"""Brute-force certification: quantile grids, discrete optimum, gap reports."""

import numpy as np
import pytest
from scipy.optimize import linprog

from dualalloc.problem import ChannelSampler, ContractError, ProblemSpec
from dualalloc.problems import AwgnConfig, build_awgn
from dualalloc.verify import (
    DualityGapReport,
    brute_force_primal,
    check_sandwich,
    exp_quantile_grid,
    lambda_norm_bound,
    normalized_gap,
    surrogate_sandwich,
    table_policy,
)


def test_quantile_grid_inverts_the_cdf():
    h, probs = exp_quantile_grid(2.0, 4)
    assert h.shape == (4, 1)
    assert np.allclose(probs, 0.25)
    # each node sits at the quantile midpoint: 1 - exp(-2 h) = (i + 0.5) / 4
    u = 1.0 - np.exp(-2.0 * h[:, 0])
    assert np.allclose(u, (np.arange(4) + 0.5) / 4, atol=1e-12)
    assert np.all(np.diff(h[:, 0]) > 0)


def test_quantile_grid_joint_states():
    h, probs = exp_quantile_grid(2.0, 3, dim=2)
    assert h.shape == (9, 2)
    assert np.allclose(probs, 1.0 / 9)
    marg = np.unique(h[:, 0])
    assert marg.shape == (3,)
    # cartesian product layout
    assert np.allclose(h[:3, 0], marg[0])
    with pytest.raises(ContractError):
        exp_quantile_grid(2.0, 0)


def test_quantile_grid_mean_converges_to_half():
    coarse = exp_quantile_grid(2.0, 8)[0].mean()
    fine = exp_quantile_grid(2.0, 512)[0].mean()
    assert abs(fine - 0.5) < abs(coarse - 0.5)
    assert abs(fine - 0.5) < 0.01


def _awgn_m1(p_max=1.0, x_cap=5.0):
    prob, model = build_awgn(AwgnConfig(m=1, w=1.0, v=1.0, p_max=p_max, x_cap=x_cap))
    return prob, model


def test_brute_force_matches_linear_program():
    # the discretized instance is an LP over per-state allocation laws
    prob, _ = _awgn_m1()
    h_states, probs = exp_quantile_grid(2.0, 6)
    p_grid = np.linspace(0.0, 10.0, 8)
    res = brute_force_primal(prob, h_states, probs, p_grid)

    rates = np.log1p(h_states * p_grid[None, :])  # (6, 8)
    n_s, n_a = rates.shape
    c = -(probs[:, None] * rates).ravel()
    a_ub = (probs[:, None] * np.tile(p_grid, (n_s, 1))).ravel()[None, :]
    a_eq = np.zeros((n_s, n_s * n_a))
    for s in range(n_s):
        a_eq[s, s * n_a : (s + 1) * n_a] = 1.0
    lp = linprog(c, A_ub=a_ub, b_ub=[1.0], A_eq=a_eq, b_eq=np.ones(n_s),
                 bounds=(0.0, None), method="highs")
    assert lp.status == 0
    assert res.value == pytest.approx(-lp.fun, abs=1e-8)
    # budget binds at this optimum and the mixture closes it exactly
    assert res.expected_f[prob.budget_row] == pytest.approx(0.0, abs=1e-9)
    assert 0.0 <= res.mix_weight <= 1.0
    assert res.budget_price > 0.0
    assert np.allclose(res.lambda_star, [1.0, res.budget_price], atol=1e-12)


def test_brute_force_near_quadrature_optimum():
    # frozen quadrature solution of the continuous instance: 0.4776973609121695
    prob, _ = _awgn_m1()
    h_states, probs = exp_quantile_grid(2.0, 32)
    res = brute_force_primal(prob, h_states, probs, np.linspace(0.0, 10.0, 64))
    assert res.value == pytest.approx(0.4776973609121695, rel=0.05)


def test_brute_force_single_state_picks_best_affordable_level():
    prob, _ = _awgn_m1(p_max=3.0)
    h_states = np.array([[0.8]])
    probs = np.array([1.0])
    p_grid = np.linspace(0.0, 10.0, 21)
    res = brute_force_primal(prob, h_states, probs, p_grid)
    affordable = p_grid[p_grid <= 3.0 + 1e-12]
    want = np.log1p(0.8 * affordable).max()
    assert res.value == pytest.approx(want, abs=1e-9)


def test_brute_force_two_users_meets_budget():
    w, v = np.array([1.0, 2.0]), np.array([1.0, 0.5])
    prob, _ = build_awgn(AwgnConfig(m=2, w=w, v=v, p_max=2.0))
    h_states, probs = exp_quantile_grid(2.0, 5, dim=2)
    res = brute_force_primal(prob, h_states, probs, np.linspace(0.0, 10.0, 12))
    assert res.expected_f[prob.budget_row] >= -1e-9
    assert res.value > 0.0
    assert res.mean_allocation().shape == (25, 2)


def test_brute_force_without_budget_row_saturates():
    # pure rate maximization puts every state at the top grid level
    prob = ProblemSpec(
        n_channels=1,
        m_resources=1,
        u_metrics=1,
        r_utilities=0,
        f=lambda p, h: np.log1p(p * h),
        g0=lambda x: np.asarray(x, dtype=float) @ np.ones(1),
        sampler=ChannelSampler(rate=2.0, dim=1),
        x_lower=np.zeros(1),
        x_upper=np.full(1, 100.0),
        p_lower=np.zeros(1),
        p_upper=np.full(1, 10.0),
    )
    h_states, probs = exp_quantile_grid(2.0, 4)
    p_grid = np.linspace(0.0, 10.0, 5)
    res = brute_force_primal(prob, h_states, probs, p_grid)
    want = float(probs @ np.log1p(h_states[:, 0] * 10.0))
    assert res.value == pytest.approx(want, abs=1e-12)
    assert np.all(res.table_tight == 10.0)
    assert res.budget_price == 0.0


def test_brute_force_contract_errors():
    prob, _ = _awgn_m1()
    h_states, probs = exp_quantile_grid(2.0, 4)
    with pytest.raises(ContractError):
        brute_force_primal(prob, h_states, probs, np.linspace(0, 10, 65))
    with pytest.raises(ContractError):
        brute_force_primal(prob, h_states, np.full(4, 0.3), np.linspace(0, 10, 4))
    with pytest.raises(ContractError):
        brute_force_primal(prob, h_states[:, :0], probs, np.linspace(0, 10, 4))
    # an all-or-nothing grid cannot meet a small budget
    with pytest.raises(ContractError):
        brute_force_primal(prob, h_states, probs, np.array([9.0]))
    prob3, _ = build_awgn(AwgnConfig(m=3, p_max=3.0))
    h3, probs3 = exp_quantile_grid(2.0, 2, dim=3)
    with pytest.raises(ContractError):
        brute_force_primal(prob3, h3, probs3, np.array([0.0, 1.0]))


def test_brute_force_requires_linear_utility():
    prob, _ = _awgn_m1()
    bent = ProblemSpec(
        n_channels=1,
        m_resources=1,
        u_metrics=2,
        r_utilities=0,
        f=prob.f,
        g0=lambda x: float(np.square(x).sum()),
        sampler=prob.sampler,
        x_lower=prob.x_lower,
        x_upper=prob.x_upper,
        p_lower=prob.p_lower,
        p_upper=prob.p_upper,
        budget_row=1,
    )
    h_states, probs = exp_quantile_grid(2.0, 4)
    with pytest.raises(ContractError):
        brute_force_primal(bent, h_states, probs, np.linspace(0, 10, 4))


def test_table_policy_lookup():
    h_states = np.array([[0.1], [1.0], [2.0]])
    table = np.array([[0.0], [5.0], [10.0]])
    pol = table_policy(h_states, table)
    assert np.array_equal(pol(h_states), table)
    assert np.array_equal(pol(np.array([[0.95], [2.4]])), [[5.0], [10.0]])


def test_lambda_norm_bound_formula():
    assert lambda_norm_bound(10.0, 4.0, 2.0) == pytest.approx(3.0, abs=1e-15)
    with pytest.raises(ContractError):
        lambda_norm_bound(10.0, 4.0, 0.0)


def test_normalized_gap_properties():
    assert normalized_gap(9.5, 10.0) == pytest.approx(0.05, abs=1e-15)
    assert normalized_gap(19.0, 20.0) == pytest.approx(normalized_gap(9.5, 10.0), abs=1e-15)
    assert normalized_gap(10.0, 10.0) == 0.0
    with pytest.raises(ContractError):
        normalized_gap(1.0, 0.0)


def test_surrogate_sandwich_certifies_itself():
    # with the oracle's own table as the policy the dual value equals the
    # discretized optimum and the sandwich must close
    prob, _ = _awgn_m1()
    report = surrogate_sandwich(prob, states=12, levels=24, pairs=2000)
    assert isinstance(report, DualityGapReport)
    assert report.sandwich_ok
    assert report.d_phi_hat == pytest.approx(report.p_star_hat, abs=1e-12)
    assert report.refine_residual == 0.0
    assert report.lower_bound <= report.d_phi_hat <= report.upper_bound
    assert report.eps_hat >= 0.0
    assert report.lipschitz_hat > 0.0
    assert report.lambda_norm_bound > report.lambda_star_l1
    d = report.to_dict()
    assert set(d) >= {"p_star_hat", "d_phi_hat", "lower_bound", "upper_bound", "sandwich_ok"}


def test_check_sandwich_report_is_structurally_sound():
    from dualalloc.problem import DualIterates

    prob, model = _awgn_m1()
    model.init_theta(np.random.default_rng(0))
    duals = DualIterates(np.array([1.0, 0.3]), np.zeros(0))
    x_bar = np.array([0.4, 0.0])
    report = check_sandwich(prob, model, x_bar, duals, states=8, levels=16,
                            eval_batch=4000, pairs=2000)
    assert report.lower_bound <= report.upper_bound
    assert report.mc_tol > 0.0
    assert report.eps_hat > 0.0
    assert np.isfinite(report.d_phi_hat)
