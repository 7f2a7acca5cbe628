from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desk import binding_pair, chain, cvx_market, fleet, slack_pair, unit
from gridmarket.envelope import allocate, equal_split
from gridmarket.feeder import AffineConstraintMap, voltage_constraint_map
from gridmarket.market import (
    MarketInfeasible,
    Mechanism,
    best_response,
    clear,
    clear_locational,
    clear_uniform_doe,
    clear_uniform_limit,
    construct_limit_trades,
    settle,
)
from gridmarket.prosumer import payoff, utility_value
from gridmarket.scenario import generate_synthetic, load_scenario

SHORTFALL = Path(__file__).resolve().parents[1] / "scenarios" / "envelope_shortfall" / "scenario.toml"
WELFARE_TOL = 1e-6
PRICE_TOL = 1e-6


def shares(fd, fl, eps=1e-4):
    cmap = voltage_constraint_map(fd).for_agents(fl.nodes - 1)
    return allocate(cmap, epsilon=eps, horizon=fl.horizon)


@pytest.mark.parametrize("make", [binding_pair, slack_pair])
@pytest.mark.parametrize("mechanism", ["locational", "uniform-doe", "uniform-limit"])
def test_matches_independent_model(make, mechanism):
    fd, fl = make()
    alloc = shares(fd, fl)
    ref = cvx_market(fd, fl, mechanism, alloc.w)
    if ref is None:
        with pytest.raises(MarketInfeasible):
            clear(mechanism, fd, fl, alloc)
        return
    res = clear(mechanism, fd, fl, alloc)
    assert res.welfare == pytest.approx(ref.welfare, rel=WELFARE_TOL, abs=WELFARE_TOL)
    assert res.prices.alpha == pytest.approx(ref.alpha, abs=PRICE_TOL * (1 + np.abs(ref.alpha).max()))


@pytest.mark.parametrize("mechanism", ["locational", "uniform-doe", "uniform-limit"])
def test_synthetic_matches_independent_model(mechanism):
    s = generate_synthetic(4, 5, 8, feeder="ieee13", impedance_scale=3000.0)
    fd, fl = s.feeder(), s.fleet()
    alloc = shares(fd, fl, eps=s.epsilon)
    ref = cvx_market(fd, fl, mechanism, alloc.w)
    assert ref is not None
    res = clear(mechanism, fd, fl, alloc)
    assert res.welfare == pytest.approx(ref.welfare, rel=WELFARE_TOL)


def test_binding_voltage_separates_prices():
    fd, fl = binding_pair()
    res = clear_locational(fd, fl)
    lam = res.prices.locational
    assert np.abs(lam[0] - lam[1]).min() > 1.0
    # importer at the weak node pays more
    assert np.all(lam[1] > lam[0])
    assert res.prices.xi_lower.max() > 0
    assert res.budget_total > 0.1


def test_slack_voltage_gives_one_price():
    fd, fl = slack_pair()
    res = clear_locational(fd, fl)
    assert np.ptp(res.prices.locational, axis=0).max() <= 1e-8
    assert abs(res.budget_total) <= 1e-8


def test_surplus_equals_shadow_value_of_headroom():
    fd, fl = binding_pair()
    res = clear_locational(fd, fl)
    nu = res.cmap.bound
    assert res.budget == pytest.approx(res.duals["grid"] @ nu, abs=1e-8)
    assert res.budget_total == pytest.approx(cvx_market(fd, fl, "locational").surplus, rel=1e-6)


def test_limit_price_zero_when_envelopes_slack():
    fd, fl = slack_pair()
    res = clear_uniform_limit(fd, fl, shares(fd, fl))
    assert np.abs(res.prices.beta).max() <= 1e-6


def test_limit_trading_matches_locational_welfare_when_binding():
    fd, fl = binding_pair()
    loc = clear_locational(fd, fl)
    lim = clear_uniform_limit(fd, fl, shares(fd, fl))
    assert lim.welfare == pytest.approx(loc.welfare, rel=1e-8)
    assert lim.prices.alpha == pytest.approx(loc.prices.alpha, abs=1e-6)
    assert lim.prices.beta.max() > 0


def test_idle_fleet_trades_nothing():
    fd = chain(3)
    fl = fleet(*(unit(np.zeros(3), k, cap=0.0, x0=0.0, rate=0.0, terminal=0.0) for k in (1, 2, 3)))
    for mech in Mechanism:
        res = clear(mech, fd, fl, shares(fd, fl))
        assert np.abs(res.P).max() <= 1e-8
        assert abs(res.welfare) <= 1e-8
        assert abs(res.budget_total) <= 1e-8


def test_single_prosumer_cannot_trade():
    fd = chain(1)
    fl = fleet(unit([0.1, -0.1], 1))
    res = clear_uniform_doe(fd, fl, shares(fd, fl))
    assert np.abs(res.P).max() <= 1e-8


def test_best_response_without_prices_sells_nothing_of_value():
    pr = unit([0.1, 0.1], 1, terminal=0.0, input_weight=1.0)
    br = best_response(pr, np.zeros(2), p_box=1.0)
    assert br.U == pytest.approx(0.0, abs=1e-7)
    assert br.payoff == pytest.approx(0.0, abs=1e-9)


def test_best_response_sells_at_high_price():
    pr = unit([0.1, 0.1], 1, x0=0.5, terminal=0.0, input_weight=1.0)
    br = best_response(pr, np.full(2, 10.0), p_box=1.0)
    # empty the battery to its floor (0.3 of energy at efficiency 0.9), spread evenly, and sell everything
    assert br.U.reshape(2) == pytest.approx([-1 / 6, -1 / 6], abs=1e-6)
    assert br.p == pytest.approx(0.1 - br.U.reshape(2), abs=1e-6)
    assert br.payoff == pytest.approx(payoff(pr, br.U.reshape(2, 1), br.p, np.full(2, 10.0)))


def test_cleared_plans_are_best_responses():
    fd, fl = binding_pair()
    res = clear_locational(fd, fl)
    for i, pr in enumerate(fl):
        br = best_response(pr, res.prices.energy(i), p_box=5.0)
        here = payoff(pr, res.U[i].reshape(pr.T, pr.m), res.P[i], res.prices.energy(i))
        assert br.payoff - here <= 1e-7 * (1 + abs(here))


def test_settlement_balances():
    fd, fl = binding_pair()
    alloc = shares(fd, fl)
    loc = settle(clear_locational(fd, fl))
    assert loc.weakly_balanced and not loc.strongly_balanced
    lim = settle(clear_uniform_limit(fd, fl, alloc))
    assert lim.strongly_balanced
    assert lim.incomes == pytest.approx(lim.energy_income + lim.limit_income)


def test_equal_shares_redistribute_surplus():
    fd, fl = binding_pair()
    loc = clear_locational(fd, fl)
    eq = clear_uniform_limit(fd, fl, equal_split(loc.cmap, fl.horizon))
    surplus = cvx_market(fd, fl, "locational").surplus
    assert eq.incomes - loc.incomes == pytest.approx(np.full(2, surplus / 2), rel=1e-5)


def test_envelope_shortfall_scenario():
    s = load_scenario(SHORTFALL)
    fd, fl = s.feeder(), s.fleet()
    alloc = shares(fd, fl, eps=s.epsilon)
    with pytest.raises(MarketInfeasible) as info:
        clear_uniform_doe(fd, fl, alloc)
    assert "envelope" in info.value.explanation
    assert set(info.value.prosumers) == {0, 1}
    lim = clear_uniform_limit(fd, fl, alloc)
    loc = clear_locational(fd, fl)
    assert lim.welfare == pytest.approx(loc.welfare, rel=1e-8)
    assert cvx_market(fd, fl, "uniform-doe", alloc.w) is None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6), st.integers(1, 4))
def test_constructed_limit_trades(seed, N, T):
    rng = np.random.default_rng(seed)
    M = 3
    C = rng.standard_normal((M, N))
    w = rng.uniform(0.1, 1.0, (T, N, M))
    nu = w.sum(axis=1)
    cmap = AffineConstraintMap(C, nu)
    P = rng.standard_normal((N, T))
    # shrink P until the global rows hold
    while np.any(cmap.total(P) > nu):
        P *= 0.5
    L = construct_limit_trades(P, w, cmap)
    assert np.abs(L.sum(axis=0)).max() <= 1e-12
    g = P[:, :, None] * C.T[:, None, :]
    assert np.max(g + L - w.transpose(1, 0, 2)) <= 1e-12


def test_welfare_is_sum_of_utilities():
    fd, fl = binding_pair()
    res = clear_locational(fd, fl)
    total = sum(utility_value(pr, res.U[i].reshape(pr.T, pr.m)) for i, pr in enumerate(fl))
    assert res.welfare == pytest.approx(total, rel=1e-10)
