import dataclasses
import json
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import gridmarket.verify as verify
from desk import binding_pair, chain, fleet, slack_pair, unit
from gridmarket.envelope import allocate, equal_split
from gridmarket.feeder import voltage_constraint_map
from gridmarket.market import (
    MarketInfeasible,
    clear,
    clear_locational,
    clear_uniform_doe,
    clear_uniform_limit,
    payment_scale,
    with_injections,
    with_prices,
)
from gridmarket.scenario import load_scenario
from gridmarket.verify import (
    BALANCE_TOL,
    BUDGET_TOL,
    CONSTRUCTION_TOL,
    PRICE_TOL,
    VERIFY_TOL,
    VOLTAGE_TOL,
    GridTooCoarse,
    brute_force_oracle,
    certify_equilibrium,
    check_budget_balance,
    check_surplus_redistribution,
    check_slater_margin,
    check_welfare_equivalence,
    check_uniform_prices,
    verify_all,
)

SHORTFALL = Path(__file__).resolve().parents[1] / "scenarios" / "envelope_shortfall" / "scenario.toml"


def by_name(checks, name):
    found = [c for c in checks if c.name == name]
    assert len(found) == 1, name
    return found[0]


@pytest.fixture(scope="module")
def binding():
    fd, fl = binding_pair()
    cmap = voltage_constraint_map(fd).for_agents(fl.nodes - 1)
    alloc = allocate(cmap, horizon=fl.horizon)
    loc = clear_locational(fd, fl)
    lim = clear_uniform_limit(fd, fl, alloc)
    return fd, fl, alloc, loc, lim


@pytest.fixture(scope="module")
def slack_doe():
    fd, fl = slack_pair()
    cmap = voltage_constraint_map(fd).for_agents(fl.nodes - 1)
    alloc = allocate(cmap, horizon=fl.horizon)
    return fd, fl, alloc, clear_uniform_doe(fd, fl, alloc)


def test_clean_results_pass(binding, slack_doe):
    fd, fl, alloc, loc, lim = binding
    report = verify_all(fd, fl, {"locational": loc, "uniform-limit": lim}, alloc)
    assert report.ok, report.table()
    names = {c.name for c in report.checks}
    assert {"welfare_equivalence", "uniform_price_identity", "budget_weak", "budget_limits",
            "surplus_redistribution", "complementary_slackness", "locational_price_identity"} <= names
    sfd, sfl, salloc, doe = slack_doe
    assert all(c.passed for c in certify_equilibrium(doe, sfd, sfl, salloc))
    assert all(c.passed for c in check_budget_balance(doe))


def test_balance_fault_reported_with_its_size(binding):
    fd, fl, _, loc, _ = binding
    P = loc.P.copy()
    P[0, 0] += 0.1
    check = by_name(certify_equilibrium(with_injections(loc, P), fd, fl), "power_balance")
    assert not check.passed
    assert check.residual == pytest.approx(0.1)


def test_price_shift_breaks_best_responses(binding):
    fd, fl, _, loc, _ = binding
    alpha = loc.prices.alpha.copy()
    alpha[0] += 1.0
    shifted = with_prices(loc, alpha=alpha, locational=loc.prices.locational + np.eye(2)[0][None, :] * 1.0)
    assert not by_name(certify_equilibrium(shifted, fd, fl), "best_response_gap").passed


# each check must fail when its target is pushed ten tolerances away


def test_fault_power_and_limit_balance(binding):
    fd, fl, _, loc, lim = binding
    P = loc.P.copy()
    P[1, 1] += 10 * BALANCE_TOL
    assert not by_name(certify_equilibrium(with_injections(loc, P), fd, fl), "power_balance").passed
    L = lim.L.copy()
    L[0, 0, 0] += 10 * BALANCE_TOL
    assert not by_name(certify_equilibrium(replace(lim, L=L), fd, fl), "limit_balance").passed


def test_fault_best_response_gap(binding):
    fd, fl, _, loc, _ = binding
    # selling less at a positive price lowers the cleared payoff of prosumer 1
    lam = loc.prices.locational[1]
    t = int(np.argmax(np.abs(lam)))
    here = verify._slice_payoff(loc, fl, 1)
    delta = 10 * VERIFY_TOL * (1 + abs(here)) / abs(lam[t]) * 1.5
    P = loc.P.copy()
    P[1, t] -= np.sign(lam[t]) * delta
    gaps = verify.best_response_gaps(with_injections(loc, P), fl)
    assert gaps[1] > VERIFY_TOL


def test_fault_own_constraints(binding):
    fd, fl, _, loc, _ = binding
    P = loc.P.copy()
    U = loc.U[0].reshape(fl[0].T, fl[0].m)
    P[0, 0] = fl[0].trade_cap(U)[0] + 10 * BALANCE_TOL * (1 + np.abs(fl[0].net_supply).max())
    assert not by_name(certify_equilibrium(with_injections(loc, P), fd, fl), "own_constraints").passed


def test_fault_voltage_band(binding):
    fd, fl, _, loc, _ = binding
    # node 2 sits on its lower limit; importing a little more pushes it below
    dv_dp = fd.R[1, 1] / (2 * 0.95)
    P = loc.P.copy()
    P[1, 0] -= 10 * VOLTAGE_TOL / dv_dp * 1.1
    check = by_name(certify_equilibrium(with_injections(loc, P), fd, fl), "voltage_band")
    assert not check.passed and check.residual > 10 * VOLTAGE_TOL * 0.99


def test_fault_envelope_and_limit_sign(binding):
    fd, fl, alloc, _, lim = binding
    L = lim.L.copy()
    g = lim.P[0, 0] * lim.cmap.coeffs[0, 0]
    L[0, 0, 0] = alloc.w[0, 0, 0] - g + 10 * BALANCE_TOL * (1 + np.abs(alloc.w).max())
    assert not by_name(certify_equilibrium(replace(lim, L=L), fd, fl, alloc), "envelope_containment").passed
    beta = lim.prices.beta.copy()
    beta[0, 0] = -10 * 1e-9 * verify._price_scale(lim)
    assert not by_name(certify_equilibrium(with_prices(lim, beta=beta), fd, fl, alloc), "limit_price_sign").passed


def test_fault_price_identity(binding):
    fd, fl, _, loc, _ = binding
    lam = loc.prices.locational.copy()
    lam[0, 0] += 10 * VERIFY_TOL * verify._price_scale(loc)
    assert not by_name(certify_equilibrium(with_prices(loc, locational=lam), fd, fl),
                       "locational_price_identity").passed


def test_fault_complementary_slackness(binding):
    fd, fl, _, loc, _ = binding
    # price the slack upper limit at node 1
    v = fd.v0 + fd.R @ loc.P
    slack = fd.v_upper[0] - v[0, 0]
    xi = loc.prices.xi_upper.copy()
    xi[0, 0] = 10 * VERIFY_TOL * verify._price_scale(loc) / slack
    check = by_name(certify_equilibrium(with_prices(loc, xi_upper=xi), fd, fl), "complementary_slackness")
    assert not check.passed


def test_fault_welfare_equivalence(binding):
    fd, fl, alloc, loc, lim = binding
    off = replace(lim, welfare=lim.welfare + 10 * VERIFY_TOL * (1 + abs(loc.welfare)))
    checks = check_welfare_equivalence(loc, off, alloc, fd, fl)
    assert not by_name(checks, "welfare_equivalence").passed
    assert not by_name(checks, "constructed_point_welfare").passed


def test_fault_constructed_limits(binding, monkeypatch):
    fd, fl, alloc, loc, lim = binding
    scale = 1 + np.abs(alloc.w).max()
    # shrinking one prosumer's shares leaves the binding rows short; the construction spreads it over N
    w = alloc.w.copy()
    w[:, 0, :] -= 10 * CONSTRUCTION_TOL * scale * fl.N * 1.1
    assert not by_name(check_welfare_equivalence(loc, lim, w, fd, fl), "constructed_limit_feasible").passed

    real = verify.construct_limit_trades

    def skewed(P, w, cmap):
        L = real(P, w, cmap)
        L[0, 0, 0] += 10 * CONSTRUCTION_TOL * scale
        return L

    monkeypatch.setattr(verify, "construct_limit_trades", skewed)
    assert not by_name(check_welfare_equivalence(loc, lim, alloc, fd, fl), "constructed_limit_balance").passed


def test_fault_uniform_price(binding):
    _, _, _, loc, lim = binding
    alpha = lim.prices.alpha + 10 * PRICE_TOL
    assert not check_uniform_prices(loc, with_prices(lim, alpha=alpha))[0].passed


def test_fault_budgets(binding):
    _, _, _, loc, lim = binding
    scale = payment_scale(loc)
    budget = loc.budget.copy()
    budget[0] = -10 * BUDGET_TOL * scale
    checks = check_budget_balance(replace(loc, budget=budget))
    assert not by_name(checks, "budget_weak").passed
    assert not by_name(checks, "budget_identity").passed

    scale = payment_scale(lim)
    P = lim.P.copy()
    P[0, 0] += 10 * BUDGET_TOL * scale / abs(lim.prices.alpha[0]) * 1.1
    assert not by_name(check_budget_balance(with_injections(lim, P)), "budget_energy").passed
    t, k = np.unravel_index(int(np.argmax(lim.prices.beta)), lim.prices.beta.shape)
    L = lim.L.copy()
    L[0, t, k] += 10 * BUDGET_TOL * scale / lim.prices.beta[t, k] * 1.1
    assert not by_name(check_budget_balance(replace(lim, L=L)), "budget_limits").passed


def test_fault_redistribution(binding):
    fd, fl, _, loc, _ = binding
    eq = clear_uniform_limit(fd, fl, equal_split(loc.cmap, fl.horizon))
    assert all(c.passed for c in check_surplus_redistribution(loc, fd, fl, res_equal=eq))
    scale = 1 + np.abs(loc.incomes).max() + abs(loc.budget_total / 2)
    bumped = replace(eq, energy_income=eq.energy_income + np.array([10 * VERIFY_TOL * scale, 0.0]))
    checks = check_surplus_redistribution(loc, fd, fl, res_equal=bumped)
    assert not by_name(checks, "surplus_redistribution").passed
    assert not by_name(checks, "surplus_gain_spread").passed


def test_nonbinding_incomes_identical():
    fd, fl = slack_pair()
    loc = clear_locational(fd, fl)
    eq = clear_uniform_limit(fd, fl, equal_split(loc.cmap, fl.horizon))
    assert eq.incomes == pytest.approx(loc.incomes, abs=1e-6)


def test_slater_margin():
    fd, fl = slack_pair()
    assert check_slater_margin(fd, fl, "locational")[0].passed
    s = load_scenario(SHORTFALL)
    sfd, sfl = s.feeder(), s.fleet()
    cmap = voltage_constraint_map(sfd).for_agents(sfl.nodes - 1)
    alloc = allocate(cmap, epsilon=s.epsilon, horizon=s.horizon)
    check = check_slater_margin(sfd, sfl, "uniform-doe", w=alloc.w)[0]
    assert not check.passed and check.residual < 0


# oracle


@pytest.mark.parametrize("make", [binding_pair, slack_pair])
@pytest.mark.parametrize("T", [1, 2])
@pytest.mark.parametrize("mechanism", ["locational", "uniform-doe", "uniform-limit"])
def test_oracle_agrees_with_solver(make, T, mechanism):
    fd, fl = make(T)
    cmap = voltage_constraint_map(fd).for_agents(fl.nodes - 1)
    alloc = allocate(cmap, horizon=T)
    oracle = brute_force_oracle(fd, fl, mechanism, w=alloc.w)
    try:
        res = clear(mechanism, fd, fl, alloc)
    except MarketInfeasible:
        # an empty grid is conclusive only once the miss exceeds the grid resolution
        fine = brute_force_oracle(fd, fl, mechanism, w=alloc.w, points=31)
        assert not oracle.feasible and fine.infeasible
        return
    assert oracle.feasible
    # the oracle never beats the optimum, and is within its own resolution of it
    assert oracle.welfare <= res.welfare + 1e-9 * (1 + abs(res.welfare))
    assert res.welfare - oracle.welfare <= oracle.gap + 1e-8


def test_symmetric_instance():
    fd = chain(1)
    pr = unit([0.05, -0.05], 1)
    fl = fleet(pr, unit([0.05, -0.05], 1))
    oracle = brute_force_oracle(fd, fl, "locational")
    res = clear_locational(fd, fl)
    assert oracle.P[0] == pytest.approx(-oracle.P[1])
    assert np.abs(res.P).max() <= 1e-7
    assert oracle.U[0] == pytest.approx(oracle.U[1], abs=1e-6)


def test_oracle_confirms_envelope_shortfall():
    s = load_scenario(SHORTFALL)
    s2 = dataclasses.replace(s, horizon=2, profiles_kw=s.profiles_kw[:, :2])
    fd, fl = s2.feeder(), s2.fleet()
    cmap = voltage_constraint_map(fd).for_agents(fl.nodes - 1)
    alloc = allocate(cmap, epsilon=s2.epsilon, horizon=2)
    assert brute_force_oracle(fd, fl, "uniform-doe", w=alloc.w).infeasible
    assert brute_force_oracle(fd, fl, "uniform-limit", w=alloc.w).feasible


def test_oracle_warns_when_coarse():
    fd, fl = binding_pair(1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        brute_force_oracle(fd, fl, "locational", points=3, levels=1, requested_gap=1e-12)
    assert any(issubclass(w.category, GridTooCoarse) for w in caught)


def test_oracle_limits():
    fd, fl = binding_pair(4)
    with pytest.raises(ValueError):
        brute_force_oracle(fd, fl)


def test_report_formats(binding):
    fd, fl, alloc, loc, lim = binding
    report = verify_all(fd, fl, {"locational": loc, "uniform-limit": lim}, alloc, fingerprint="abc")
    lines = report.json_lines().splitlines()
    header = json.loads(lines[0])
    assert header["fingerprint"] == "abc"
    rows = [json.loads(x) for x in lines[1:]]
    assert len(rows) == len(report.checks)
    for row in rows:
        assert {"check", "residual", "tolerance", "pass"} <= set(row)
        assert isinstance(row["residual"], float)
    assert [(r["check"], r["mechanism"]) for r in rows] == sorted((r["check"], r["mechanism"]) for r in rows)
    table = report.table()
    assert "welfare_equivalence" in table and "PASS" in table
