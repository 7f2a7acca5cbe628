"""Executable checks of equilibrium, equivalence and budget properties.

Every check yields a :class:`CheckResult` carrying a dimensionless residual,
the tolerance it was held to and the verdict.  Residuals are relative
wherever the underlying quantity has a natural scale.
"""

from __future__ import annotations

import itertools
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .envelope import EnvelopeAllocation, equal_split, worker_count
from .feeder import FeederModel, voltages_from_injections
from .market import (
    ClearingResult,
    Mechanism,
    _build_market,
    _prosumer_map,
    best_responses,
    clear_uniform_limit,
    construct_limit_trades,
    payment_scale,
)
from .prosumer import ProsumerFleet, ProsumerParams, expand_trajectory, payoff, utility_value
from .solver import check_slater

VERIFY_TOL = 1e-5
BALANCE_TOL = 1e-6
BUDGET_TOL = 1e-6
VOLTAGE_TOL = 1e-6
PRICE_TOL = 1e-4
CONSTRUCTION_TOL = 1e-8


@dataclass(frozen=True)
class CheckResult:
    name: str
    claim: str
    residual: float
    tolerance: float
    passed: bool
    mechanism: str = ""
    detail: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "check": self.name,
            "claim": self.claim,
            "mechanism": self.mechanism,
            "residual": self.residual,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "detail": self.detail,
        }, sort_keys=True)


def _check(name, claim, residual, tolerance, mechanism="", detail="", upper=True) -> CheckResult:
    residual = float(residual)
    ok = bool(np.isfinite(residual) and (residual <= tolerance if upper else residual >= tolerance))
    return CheckResult(name, claim, residual, float(tolerance), ok, str(mechanism), detail)


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)
    fingerprint: str = ""
    mechanisms: tuple = ()

    def extend(self, results: Iterable[CheckResult]) -> "VerificationReport":
        self.checks.extend(results)
        self.checks.sort(key=lambda c: (c.name, c.mechanism))
        mechs = {c.mechanism for c in self.checks if c.mechanism}
        self.mechanisms = tuple(sorted(mechs))
        return self

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def find(self, name, mechanism=None) -> list:
        return [c for c in self.checks if c.name == name and (mechanism is None or c.mechanism == mechanism)]

    def json_lines(self) -> str:
        head = json.dumps({"fingerprint": self.fingerprint, "mechanisms": list(self.mechanisms)}, sort_keys=True)
        return "\n".join([head] + [c.to_json() for c in self.checks]) + "\n"

    def table(self) -> str:
        rows = [("check", "mechanism", "residual", "tolerance", "result")]
        for c in self.checks:
            rows.append((c.name, c.mechanism or "-", f"{c.residual:.3e}", f"{c.tolerance:.0e}",
                         "PASS" if c.passed else "FAIL"))
        widths = [max(len(r[k]) for r in rows) for k in range(5)]
        lines = [f"scenario {self.fingerprint}" if self.fingerprint else "scenario -"]
        for r in rows:
            lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# helpers


def nodal_injections(P: np.ndarray, fleet: ProsumerFleet, node_count: int) -> np.ndarray:
    """Sum prosumer injections onto feeder nodes; returns (node_count, T)."""
    out = np.zeros((node_count, P.shape[1]))
    np.add.at(out, fleet.nodes - 1, P)
    return out


def voltage_violation(feeder: FeederModel, P, fleet: ProsumerFleet) -> float:
    """Largest excursion of voltage magnitudes outside their band, in p.u."""
    v = voltages_from_injections(feeder, nodal_injections(P, fleet, feeder.node_count))
    mag = np.sqrt(np.maximum(v, 0.0))
    over = mag - np.sqrt(feeder.v_upper)[:, None]
    under = np.sqrt(feeder.v_lower)[:, None] - mag
    return float(max(0.0, over.max(), under.max()))


def _slice_payoff(result: ClearingResult, fleet, i) -> float:
    pr = fleet[i]
    U = result.U[i].reshape(pr.T, pr.m)
    beta = lim = None
    if result.mechanism is Mechanism.UNIFORM_LIMIT:
        beta, lim = result.prices.beta, result.L[i]
    return payoff(pr, U, result.P[i], result.prices.energy(i), beta, lim)


def _price_scale(result: ClearingResult) -> float:
    scale = np.abs(result.prices.alpha).max()
    if result.prices.locational is not None:
        scale = max(scale, np.abs(result.prices.locational).max())
    return 1.0 + float(scale)


# ---------------------------------------------------------------------------
# equilibrium certificate


def best_response_gaps(result: ClearingResult, fleet: ProsumerFleet, threads=None) -> np.ndarray:
    """Relative payoff improvement each prosumer could get by re-optimising."""
    responses = best_responses(result, fleet, threads=threads)
    gaps = np.empty(fleet.N)
    for i, br in enumerate(responses):
        here = _slice_payoff(result, fleet, i)
        gaps[i] = (br.payoff - here) / (1.0 + abs(br.payoff))
    return gaps


def _own_feasibility(result: ClearingResult, fleet: ProsumerFleet) -> float:
    worst = 0.0
    for i, pr in enumerate(fleet):
        U = result.U[i].reshape(pr.T, pr.m)
        X = expand_trajectory(pr, U)
        scale = 1.0 + max(np.abs(pr.x_upper).max(), np.abs(pr.u_upper).max())
        worst = max(
            worst,
            float(np.max(X - pr.x_upper)) / scale,
            float(np.max(pr.x_lower - X)) / scale,
            float(np.max(U - pr.u_upper)) / scale,
            float(np.max(pr.u_lower - U)) / scale,
            float(np.max(np.abs(U[~pr.availability]), initial=0.0)) / scale,
            float(np.max(result.P[i] - pr.trade_cap(U))) / (1.0 + np.abs(pr.net_supply).max()),
        )
    return worst


def _complementarity(result: ClearingResult, feeder: FeederModel, fleet: ProsumerFleet) -> float:
    """max |dual * slack| over every priced inequality, relative to the price level."""
    prods = []
    if "cap" in result.duals:
        caps = np.stack([pr.trade_cap(result.U[i].reshape(pr.T, pr.m)) for i, pr in enumerate(fleet)])
        prods.append(result.duals["cap"] * (caps - result.P))
    mech = result.mechanism
    cmap = result.cmap
    if mech is Mechanism.LOCATIONAL:
        v = voltages_from_injections(feeder, nodal_injections(result.P, fleet, feeder.node_count))
        xi_u, xi_l = result.prices.xi_upper, result.prices.xi_lower
        if xi_u is not None:
            prods.append(xi_u * (feeder.v_upper[None, :] - v.T))
            prods.append(xi_l * (v.T - feeder.v_lower[None, :]))
        else:
            slack = np.stack([cmap.bound_at(t) for t in range(result.P.shape[1])]) - cmap.total(result.P)
            prods.append(result.duals["grid"] * slack)
    elif mech is Mechanism.UNIFORM_DOE:
        g = result.P[:, :, None] * cmap.coeffs.T[:, None, :]
        prods.append(result.duals["doe"] * (result.w.transpose(1, 0, 2) - g))
    else:
        g = result.P[:, :, None] * cmap.coeffs.T[:, None, :]
        prods.append(result.duals["limit"] * (result.w.transpose(1, 0, 2) - g - result.L))
    worst = max(float(np.max(np.abs(p), initial=0.0)) for p in prods) if prods else 0.0
    return worst / _price_scale(result)


def certify_equilibrium(
    result: ClearingResult,
    feeder: FeederModel,
    fleet: ProsumerFleet,
    allocation: Optional[EnvelopeAllocation] = None,
    tol: float = VERIFY_TOL,
    threads: Optional[int] = None,
) -> list:
    """Best responses, balance, grid safety, price identity and complementary slackness."""
    mech = result.mechanism.value
    out = []
    gaps = best_response_gaps(result, fleet, threads)
    worst = int(np.argmax(gaps))
    out.append(_check("best_response_gap", "every prosumer is individually optimal at the prices",
                      max(0.0, gaps.max()), tol, mech, f"worst prosumer {worst}"))
    out.append(_check("own_constraints", "cleared plans respect each prosumer's constraints",
                      max(0.0, _own_feasibility(result, fleet)), BALANCE_TOL, mech))

    bal = float(np.abs(result.P.sum(axis=0)).max())
    out.append(_check("power_balance", "traded power sums to zero every step", bal, BALANCE_TOL, mech))
    if result.L is not None:
        lbal = float(np.abs(result.L.sum(axis=0)).max())
        out.append(_check("limit_balance", "traded limits sum to zero every step", lbal, BALANCE_TOL, mech))

    out.append(_check("voltage_band", "voltages stay inside the band",
                      voltage_violation(feeder, result.P, fleet), VOLTAGE_TOL, mech))
    if result.mechanism is not Mechanism.LOCATIONAL:
        w = result.w if allocation is None else allocation.w
        cmap = result.cmap
        g = result.P[:, :, None] * cmap.coeffs.T[:, None, :]
        use = g if result.L is None else g + result.L
        excess = float(np.max(use - w.transpose(1, 0, 2)))
        scale = 1.0 + float(np.abs(w).max())
        out.append(_check("envelope_containment", "each prosumer stays inside its envelope",
                          max(0.0, excess) / scale, BALANCE_TOL, mech))
        if result.prices.beta is not None:
            out.append(_check("limit_price_sign", "limit prices are nonnegative",
                              max(0.0, -float(result.prices.beta.min())) / _price_scale(result),
                              1e-9, mech))
    else:
        out.append(_check("locational_price_identity", "lambda_i = alpha + sum_k (xi_low - xi_up) R_ki",
                          _price_identity(result, feeder, fleet), tol, mech))
    out.append(_check("complementary_slackness", "prices vanish on slack constraints",
                      _complementarity(result, feeder, fleet), tol, mech))
    return out


def _price_identity(result: ClearingResult, feeder: FeederModel, fleet: ProsumerFleet) -> float:
    pr = result.prices
    if pr.xi_upper is None:
        return 0.0
    nodal = pr.alpha[None, :] + feeder.R.T @ (pr.xi_lower - pr.xi_upper).T
    expected = nodal[fleet.nodes - 1]
    return float(np.abs(expected - pr.locational).max()) / _price_scale(result)


# ---------------------------------------------------------------------------
# cross-mechanism results


def check_welfare_equivalence(
    res_loc: ClearingResult,
    res_limit: ClearingResult,
    allocation,
    feeder: FeederModel,
    fleet: ProsumerFleet,
    tol: float = VERIFY_TOL,
) -> list:
    """Equal welfare, plus an explicit limit-trading point built from the locational optimum."""
    w = allocation.w if isinstance(allocation, EnvelopeAllocation) else np.asarray(allocation)
    scale = 1.0 + abs(res_loc.welfare)
    out = [_check("welfare_equivalence", "locational and limit-trading welfare coincide",
                  abs(res_loc.welfare - res_limit.welfare) / scale, tol, "locational/uniform-limit")]

    cmap = res_limit.cmap
    L = construct_limit_trades(res_loc.P, w, cmap)
    lsum = float(np.abs(L.sum(axis=0)).max())
    g = res_loc.P[:, :, None] * cmap.coeffs.T[:, None, :]
    excess = float(np.max(L - (w.transpose(1, 0, 2) - g)))
    lscale = 1.0 + float(np.abs(w).max())
    out.append(_check("constructed_limit_balance", "constructed limit trades sum to zero",
                      lsum / lscale, CONSTRUCTION_TOL, "uniform-limit"))
    out.append(_check("constructed_limit_feasible", "constructed limit trades respect every envelope",
                      max(0.0, excess) / lscale, CONSTRUCTION_TOL, "uniform-limit"))
    # welfare of the constructed point, evaluated from utilities rather than the solver objective
    attained = sum(
        utility_value(pr, res_loc.U[i].reshape(pr.T, pr.m)) for i, pr in enumerate(fleet)
    )
    out.append(_check("constructed_point_welfare", "the constructed point attains the limit-trading optimum",
                      abs(attained - res_limit.welfare) / scale, tol, "uniform-limit"))
    return out


def check_uniform_prices(
    res_loc: ClearingResult,
    res_limit: ClearingResult,
    price_scale: float = 1.0,
    tol: float = PRICE_TOL,
) -> list:
    """Uniform limit-trading energy price equals the locational balance price.

    ``price_scale`` converts internal prices into the reporting unit.
    """
    gap = float(np.abs(res_limit.prices.alpha - res_loc.prices.alpha).max()) * price_scale
    return [_check("uniform_price_identity", "limit-trading price equals the locational energy component",
                   gap, tol, "locational/uniform-limit")]


def check_budget_balance(result: ClearingResult, feeder: Optional[FeederModel] = None,
                       tol: float = BUDGET_TOL) -> list:
    """Weak balance for locational pricing, strong balance for the uniform designs."""
    scale = payment_scale(result)
    mech = result.mechanism.value
    out = []
    if result.mechanism is Mechanism.LOCATIONAL:
        deficit = max(0.0, -float(result.budget.min()))
        out.append(_check("budget_weak", "locational payments leave a nonnegative surplus",
                          deficit / scale, tol, mech))
        z = result.duals.get("grid")
        if z is not None:
            bounds = np.stack([result.cmap.bound_at(t) for t in range(result.P.shape[1])])
            collected = np.sum(z * bounds, axis=1)
            out.append(_check("budget_identity", "surplus equals shadow prices times voltage headroom",
                              float(np.abs(collected - result.budget).max()) / scale, tol, mech))
        return out
    energy = np.stack([result.prices.alpha * result.P[i] for i in range(result.P.shape[0])]).sum(axis=0)
    out.append(_check("budget_energy", "energy payments cancel every step",
                      float(np.abs(energy).max()) / scale, tol, mech))
    if result.L is not None and result.prices.beta is not None:
        lim = np.einsum("itk,tk->t", result.L, result.prices.beta)
        out.append(_check("budget_limits", "limit payments cancel every step",
                          float(np.abs(lim).max()) / scale, tol, mech))
    return out


def check_surplus_redistribution(
    res_loc: ClearingResult,
    feeder: FeederModel,
    fleet: ProsumerFleet,
    tol: float = VERIFY_TOL,
    res_equal: Optional[ClearingResult] = None,
) -> list:
    """Limit trading under equal shares hands each prosumer surplus/N on top of its locational income."""
    if res_equal is None:
        res_equal = clear_uniform_limit(feeder, fleet, equal_split(res_loc.cmap, fleet.horizon), cmap=res_loc.cmap)
    N = fleet.N
    share = res_loc.budget_total / N
    delta = res_equal.incomes - res_loc.incomes
    scale = 1.0 + float(np.abs(res_loc.incomes).max()) + abs(share)
    out = [
        _check("surplus_redistribution", "income gain under equal shares equals surplus/N",
               float(np.abs(delta - share).max()) / scale, tol, "locational/uniform-limit",
               f"surplus/N = {share:.6g}"),
        _check("surplus_gain_spread", "income gain is identical across prosumers",
               float(np.ptp(delta)) / scale, tol, "locational/uniform-limit"),
    ]
    return out


def check_slater_margin(feeder: FeederModel, fleet: ProsumerFleet, mechanism, w=None, cmap=None) -> list:
    """Strict-feasibility margin of the welfare program (diagnostic; passes when positive)."""
    mechanism = Mechanism(mechanism)
    cmap = _prosumer_map(feeder, fleet, cmap)
    program, _ = _build_market(fleet, cmap, mechanism, w)
    rep = check_slater(program)
    return [_check("slater_margin", "a strictly feasible point exists", rep.margin, 0.0,
                   mechanism.value, upper=False)]


# ---------------------------------------------------------------------------
# full suite


def verify_all(
    feeder: FeederModel,
    fleet: ProsumerFleet,
    results: dict,
    allocation: Optional[EnvelopeAllocation] = None,
    price_scale: float = 1.0,
    fingerprint: str = "",
    tol: float = VERIFY_TOL,
    threads: Optional[int] = None,
) -> VerificationReport:
    """Run every applicable check on ``results`` (a mechanism -> ClearingResult mapping)."""
    results = {Mechanism(k): v for k, v in results.items()}
    jobs: list[Callable[[], list]] = []
    for res in results.values():
        jobs.append(lambda res=res: certify_equilibrium(res, feeder, fleet, tol=tol, threads=threads))
        jobs.append(lambda res=res: check_budget_balance(res))
    loc = results.get(Mechanism.LOCATIONAL)
    lim = results.get(Mechanism.UNIFORM_LIMIT)
    if loc is not None and lim is not None:
        w = allocation if allocation is not None else lim.w
        jobs.append(lambda: check_welfare_equivalence(loc, lim, w, feeder, fleet, tol))
        jobs.append(lambda: check_uniform_prices(loc, lim, price_scale))
    if loc is not None:
        jobs.append(lambda: check_surplus_redistribution(loc, feeder, fleet, tol))
    n = threads or worker_count()
    report = VerificationReport(fingerprint=fingerprint)
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            for part in pool.map(lambda f: f(), jobs):
                report.extend(part)
    else:
        for f in jobs:
            report.extend(f())
    return report


# ---------------------------------------------------------------------------
# brute-force oracle


class GridTooCoarse(UserWarning):
    pass


@dataclass(frozen=True)
class OracleResult:
    welfare: float
    feasible: bool
    U: tuple
    P: Optional[np.ndarray]
    grid_points: int
    gap: float
    shortfall: float = 0.0
    levels: int = 0
    resolution: float = 0.0

    @property
    def infeasible(self) -> bool:
        """Conclusive infeasibility: every plan misses by more than one grid step can recover."""
        return not self.feasible and self.shortfall > self.resolution


def _input_axes(pr: ProsumerParams, lo=None, hi=None):
    """Per-coordinate search boxes over vec(U); unavailable inputs are pinned to zero."""
    lo = np.where(pr.availability, pr.u_lower[None, :], 0.0).ravel() if lo is None else lo
    hi = np.where(pr.availability, pr.u_upper[None, :], 0.0).ravel() if hi is None else hi
    return lo, hi


def _input_grid(pr: ProsumerParams, lo, hi, points: int, keep=None):
    """Every input plan on a grid over the box [lo, hi], with utility and trade caps.

    ``keep`` is a plan added to every axis so that refinement never loses the
    incumbent.  Plans breaking a state bound are dropped.
    """
    axes = []
    for k in range(lo.shape[0]):
        ax = np.linspace(lo[k], hi[k], points) if hi[k] > lo[k] else np.array([lo[k]])
        if keep is not None:
            ax = np.union1d(ax, [keep[k]])
        axes.append(ax)
    flat = np.array(list(itertools.product(*axes)))
    Us = flat.reshape(-1, pr.T, pr.m)
    util = np.empty(len(Us))
    ok = np.ones(len(Us), dtype=bool)
    caps = np.empty((len(Us), pr.T))
    tol = 1e-12 * (1.0 + np.abs(pr.x_upper).max())
    for k, U in enumerate(Us):
        X = expand_trajectory(pr, U)
        ok[k] = np.all(X <= pr.x_upper + tol) and np.all(X >= pr.x_lower - tol)
        util[k] = utility_value(pr, U, X)
        caps[k] = pr.trade_cap(U)
    return Us[ok], util[ok], caps[ok]


def _pair_intervals(caps1, caps2, rows):
    """Interval of p_1 (with p_2 = -p_1) allowed by trade caps and linear rows a p_1 <= b."""
    lo = -caps2
    hi = caps1.copy()
    for a, b in rows:
        if a > 0:
            hi = np.minimum(hi, b / a)
        elif a < 0:
            lo = np.maximum(lo, b / a)
        elif b < 0:
            hi = np.full_like(hi, -np.inf)
    return lo, hi


def brute_force_oracle(
    feeder: FeederModel,
    fleet: ProsumerFleet,
    mechanism="locational",
    w=None,
    points: int = 11,
    levels: int = 40,
    requested_gap: Optional[float] = None,
    cmap=None,
    max_pairs: int = 2_000_000,
) -> OracleResult:
    """Grid search for the welfare optimum of a two-prosumer market.

    Input plans of both prosumers are enumerated on a grid over their input
    boxes.  Trades are handled exactly: with two prosumers balance leaves
    one free trade per step and every constraint cuts an interval out of it.
    Limit trading uses the aggregate condition sum_i g_i(p_i) <= sum_i w_i,
    which is exactly when balanced limit trades exist.

    The search is then repeated ``levels`` times on a grid of half the width
    centred on the incumbent.  Welfare is concave, so the refinement closes
    in on the optimum; ``gap`` is the improvement made by the last
    refinement and a GridTooCoarse warning is raised when it exceeds
    ``requested_gap``.  ``shortfall`` is the smallest amount by which any
    plan of the first, full-box grid misses trade feasibility (zero when a
    feasible plan exists) and ``resolution`` the most a trade cap moves
    between neighbouring grid plans; an empty grid proves nothing unless
    the shortfall exceeds it.
    """
    if fleet.N != 2:
        raise ValueError("the oracle handles exactly two prosumers")
    if fleet.horizon > 3:
        raise ValueError("the oracle handles at most three steps")
    mechanism = Mechanism(mechanism)
    cmap = _prosumer_map(feeder, fleet, cmap)
    boxes = [_input_axes(pr) for pr in fleet]
    dims = sum(int(np.sum(hi > lo)) for lo, hi in boxes)
    points = max(3, min(points, int(max_pairs ** (1.0 / max(dims, 1)))))
    best = _oracle_search(fleet, cmap, mechanism, w, boxes, points)
    shortfall = best.shortfall
    resolution = max(
        float(np.max(np.abs(pr.energy_coeffs)[None, :] * ((hi - lo) / (points - 1)).reshape(pr.T, pr.m)))
        * pr.m
        for pr, (lo, hi) in zip(fleet, boxes)
    )
    gap = np.inf if best.feasible else 0.0
    done = 0
    if best.feasible:
        width = [(hi - lo) / 2 for lo, hi in boxes]
        for done in range(1, levels + 1):
            sub = []
            for i, (lo0, hi0) in enumerate(boxes):
                centre = best.U[i].ravel()
                sub.append((np.clip(centre - width[i] / 2, lo0, hi0), np.clip(centre + width[i] / 2, lo0, hi0)))
            nxt = _oracle_search(fleet, cmap, mechanism, w, sub, points, keep=[u.ravel() for u in best.U])
            gap = max(0.0, nxt.welfare - best.welfare)
            best = nxt
            width = [x / 2 for x in width]
            if gap == 0.0 and max(float(x.max(initial=0.0)) for x in width) < 1e-9:
                break
    result = OracleResult(best.welfare, best.feasible, best.U, best.P, points, float(gap), shortfall, done, resolution)
    if requested_gap is not None and gap > requested_gap:
        warnings.warn(f"oracle grid gap {gap:.3e} exceeds {requested_gap:.3e}", GridTooCoarse, stacklevel=2)
    return result


def _oracle_search(fleet, cmap, mechanism, w, boxes, points, keep=None) -> OracleResult:
    T = fleet.horizon
    keep = keep or [None, None]
    U1, f1, c1 = _input_grid(fleet[0], *boxes[0], points, keep[0])
    U2, f2, c2 = _input_grid(fleet[1], *boxes[1], points, keep[1])
    feasible = np.ones((len(U1), len(U2)), dtype=bool)
    miss = np.zeros((len(U1), len(U2)))
    a1, a2 = cmap.coeffs[:, 0], cmap.coeffs[:, 1]
    chosen = np.zeros((len(U1), len(U2), T))
    for t in range(T):
        caps1 = c1[:, t][:, None] * np.ones((1, len(U2)))
        caps2 = np.ones((len(U1), 1)) * c2[:, t][None, :]
        if mechanism is Mechanism.UNIFORM_DOE:
            rows = [(a1[k], w[t, 0, k]) for k in range(cmap.M)]
            rows += [(-a2[k], w[t, 1, k]) for k in range(cmap.M)]
        elif mechanism is Mechanism.UNIFORM_LIMIT:
            total = np.asarray(w)[t].sum(axis=0)
            rows = [(a1[k] - a2[k], total[k]) for k in range(cmap.M)]
        else:
            nu = cmap.bound_at(t)
            rows = [(a1[k] - a2[k], nu[k]) for k in range(cmap.M)]
        lo_t, hi_t = _pair_intervals(caps1, caps2, rows)
        feasible &= lo_t <= hi_t + 1e-12
        miss = np.maximum(miss, lo_t - hi_t)
        chosen[:, :, t] = np.clip(0.0, lo_t, np.maximum(lo_t, hi_t))
    shortfall = float(max(0.0, miss.min())) if miss.size else np.inf
    total = np.where(feasible, f1[:, None] + f2[None, :], -np.inf)
    if not np.isfinite(total).any():
        return OracleResult(-np.inf, False, (), None, points, 0.0, shortfall)
    a, b = np.unravel_index(int(np.argmax(total)), total.shape)
    P = np.stack([chosen[a, b], -chosen[a, b]])
    return OracleResult(float(total[a, b]), True, (U1[a], U2[b]), P, points, 0.0, 0.0)


def report_from_checks(checks: Iterable[CheckResult], fingerprint: str = "") -> VerificationReport:
    return VerificationReport(fingerprint=fingerprint).extend(list(checks))


def checks_as_dicts(report: VerificationReport) -> list:
    return [asdict(c) for c in report.checks]
