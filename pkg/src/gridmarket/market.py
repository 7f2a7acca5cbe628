"""Welfare programs for the three market designs, price read-out and settlement.

Each market is one multi-period program minimising negative social welfare.
Dual to price mapping (minimisation convention, stationarity
``Px + q + A'y + G'z = 0``):

===================  ==============================  =====================
constraint           dual in the solver               price
===================  ==============================  =====================
power balance        y_balance(t)                     alpha(t) = -y
voltage rows         z_grid(t) = (xi_up, xi_low)      xi_up, xi_low = z
limit balance        y_limit_balance(t)               beta(t) = -y
trade cap            z_cap(i, t)                      psi_i(t) = z
envelope rows        z_doe / z_limit(i, t)            pi_i(t) = z
===================  ==============================  =====================

Locational prices are lambda_i(t) = alpha(t) - c_i . z_grid(t).
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .envelope import EnvelopeAllocation, worker_count
from .feeder import AffineConstraintMap, FeederModel, voltage_constraint_map
from .prosumer import ProsumerFleet, ProsumerParams, payoff
from .solver import (
    InfeasibleError,
    KKTResiduals,
    ProgramBuilder,
    Solution,
    Status,
    solve,
)

# markets are solved tighter than the solver default so that prices derived
# from different programs agree to well within the verification tolerance
MARKET_TOL = 1e-10


class Mechanism(str, enum.Enum):
    LOCATIONAL = "locational"
    UNIFORM_DOE = "uniform-doe"
    UNIFORM_LIMIT = "uniform-limit"


class MarketInfeasible(InfeasibleError):
    """The welfare program has no feasible point.

    ``prosumers`` ranks the agents whose constraints carry the largest weight
    in the infeasibility certificate.
    """

    def __init__(self, message, solution=None, prosumers=(), explanation=""):
        super().__init__(message, solution)
        self.prosumers = tuple(prosumers)
        self.explanation = explanation


REMARK_DOE = (
    "uniform pricing with fixed operating envelopes is infeasible: some prosumers "
    "cannot meet their own demand inside their envelope shares; trading unused "
    "envelope headroom (uniform-limit) can restore feasibility"
)


# ---------------------------------------------------------------------------
# program assembly


class _Rows:
    """Triplet collector for one constraint family."""

    def __init__(self):
        self.r, self.c, self.v, self.rhs = [], [], [], []
        self.m = 0

    def add(self, cols, vals, rhs):
        cols = np.atleast_1d(cols)
        self.r.append(np.full(cols.shape[0], self.m))
        self.c.append(cols)
        self.v.append(np.atleast_1d(np.asarray(vals, dtype=float)))
        self.rhs.append(float(rhs))
        self.m += 1

    def add_many(self, rows, cols, vals, rhs):
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        self.r.append(np.asarray(rows) + self.m)
        self.c.append(np.asarray(cols))
        self.v.append(np.asarray(vals, dtype=float))
        self.rhs.extend(rhs.tolist())
        self.m += rhs.shape[0]

    def emit(self, builder, name, eq):
        if self.m == 0:
            return None
        args = (np.concatenate(self.r), np.concatenate(self.c), np.concatenate(self.v), np.array(self.rhs))
        return builder.add_eq(name, *args) if eq else builder.add_ineq(name, *args)


@dataclass
class _Layout:
    u: list
    x: list
    p: np.ndarray
    l: Optional[np.ndarray] = None
    row_maps: dict = field(default_factory=dict)


def _add_prosumers(b: ProgramBuilder, prosumers, p_idx, trade_cap=True):
    """Variables, dynamics, bounds, utility and trade caps for ``prosumers``.

    ``p_idx[i, t]`` indexes the trade variable of prosumer i at step t.
    """
    sizes_u = [pr.T * pr.m for pr in prosumers]
    sizes_x = [pr.T * pr.n for pr in prosumers]
    u_all = b.variables("u", int(sum(sizes_u)))
    x_all = b.variables("x", int(sum(sizes_x)))
    u_list, x_list = [], []
    ou = ox = 0
    dyn, fixed, upper, lower, cap = _Rows(), _Rows(), _Rows(), _Rows(), _Rows()
    for i, pr in enumerate(prosumers):
        T, n, m = pr.T, pr.n, pr.m
        U = u_all[ou : ou + T * m].reshape(T, m)
        X = x_all[ox : ox + T * n].reshape(T, n)
        ou += T * m
        ox += T * n
        u_list.append(U)
        x_list.append(X)
        A, B = pr.A, pr.B

        # objective: minimise -utility
        util = pr.utility
        if util.input_weight:
            b.add_quadratic(U.ravel(), U.ravel(), np.full(T * m, 2.0 * util.input_weight))
        wts = np.zeros((T, n))
        wts[: T - 1] = util.state_weights[1:]
        wts[T - 1] = util.terminal_weights
        tgt = np.broadcast_to(util.target, (T, n))
        nz = wts > 0
        if nz.any():
            b.add_quadratic(X[nz], X[nz], 2.0 * wts[nz])
            b.add_linear(X[nz], -2.0 * wts[nz] * tgt[nz])
            b.offset += float(np.sum(wts[nz] * tgt[nz] ** 2))
        d0 = pr.x0 - util.target
        b.offset += float(util.state_weights[0] @ (d0 * d0))

        # inputs: masked or pinned entries become equalities
        u_fixed = ~pr.availability | (pr.u_lower == pr.u_upper)[None, :]
        u_val = np.where(pr.availability, pr.u_lower[None, :], 0.0)
        for t, j in zip(*np.nonzero(u_fixed)):
            fixed.add(U[t, j], 1.0, u_val[t, j])
        for t, j in zip(*np.nonzero(~u_fixed)):
            if np.isfinite(pr.u_upper[j]):
                upper.add(U[t, j], 1.0, pr.u_upper[j])
            if np.isfinite(pr.u_lower[j]):
                lower.add(U[t, j], -1.0, -pr.u_lower[j])

        # dynamics x(t+1) - A x(t) - B u(t) = 0
        pinned_prev = np.isclose(pr.x0, pr.x_lower) & (pr.x_lower == pr.x_upper)
        unit_rows = np.all(A == np.eye(n), axis=1)
        for t in range(T):
            for j in range(n):
                cols = [X[t, j]]
                vals = [1.0]
                rhs = 0.0
                if t == 0:
                    rhs = float(A[j] @ pr.x0)
                else:
                    nzA = np.flatnonzero(A[j])
                    cols += list(X[t - 1, nzA])
                    vals += list(-A[j, nzA])
                nzB = np.flatnonzero(B[j])
                cols += list(U[t, nzB])
                vals += list(-B[j, nzB])
                dyn.add(np.array(cols), vals, rhs)
            # state bounds; a pinned state whose value is already implied is skipped
            free_in = ~u_fixed[t]
            for j in range(n):
                lo, hi = pr.x_lower[j], pr.x_upper[j]
                if lo == hi:
                    implied = unit_rows[j] and pinned_prev[j] and not np.any(B[j, free_in])
                    if not implied:
                        fixed.add(X[t, j], 1.0, lo)
                    continue
                if np.isfinite(hi):
                    upper.add(X[t, j], 1.0, hi)
                if np.isfinite(lo):
                    lower.add(X[t, j], -1.0, -lo)
            pinned_prev = pr.x_lower == pr.x_upper

        # trade cap p(t) + e.u(t) <= a(t) - e0
        if trade_cap:
            e = pr.energy_coeffs
            nze = np.flatnonzero(e)
            for t in range(T):
                cap.add(
                    np.concatenate([[p_idx[i, t]], U[t, nze]]),
                    np.concatenate([[1.0], e[nze]]),
                    pr.net_supply[t] - pr.energy_offset,
                )

    dyn.emit(b, "dynamics", eq=True)
    fixed.emit(b, "fixed", eq=True)
    upper.emit(b, "upper", eq=False)
    lower.emit(b, "lower", eq=False)
    if trade_cap:
        cap.emit(b, "cap", eq=False)
    return u_list, x_list


def _prosumer_map(feeder: FeederModel, fleet: ProsumerFleet, cmap: Optional[AffineConstraintMap]):
    if cmap is not None:
        return cmap
    if fleet.nodes.max() > feeder.node_count:
        raise ValueError("a prosumer sits at a node the feeder does not have")
    return voltage_constraint_map(feeder).for_agents(fleet.nodes - 1)


def _coefficient_groups(C: np.ndarray):
    """Agents sharing a coefficient column; returns (columns, member index arrays)."""
    keys: dict = {}
    for i in range(C.shape[1]):
        keys.setdefault(C[:, i].tobytes(), []).append(i)
    members = [np.array(v) for v in keys.values()]
    return np.stack([C[:, m[0]] for m in members], axis=1), members


def _build_market(fleet, cmap, mechanism, w=None):
    """Assemble the welfare program of ``mechanism``.

    Coupling rows are written on group injections P_g(t) = sum of p_i(t)
    over agents with the same constraint column, which keeps each agent's
    interface to the shared rows one-dimensional per step.  Limit trades
    enter through the envelope use m_i = l_i + g_i(p_i), so each envelope
    row is a plain bound m_i <= w_i and the limit balance reads
    sum_i m_i - sum_g c_g P_g = 0.  Both are exact rewrites.
    """
    N, T, M = fleet.N, fleet.horizon, cmap.M
    b = ProgramBuilder()
    p_idx = b.variables("p", N * T).reshape(N, T)
    u_list, x_list = _add_prosumers(b, fleet.prosumers, p_idx)
    layout = _Layout(u_list, x_list, p_idx)
    C = cmap.coeffs
    tt = np.arange(T)

    cols, members = _coefficient_groups(C)
    n_groups = len(members)
    g_idx = b.variables("group", n_groups * T).reshape(n_groups, T)
    r, c, v = [], [], []
    for g, mem in enumerate(members):
        rows = g * T + np.tile(tt, mem.size)
        r += [g * T + tt, rows]
        c += [g_idx[g], p_idx[mem].ravel()]
        v += [np.ones(T), -np.ones(mem.size * T)]
    b.add_eq("group", np.concatenate(r), np.concatenate(c), np.concatenate(v), np.zeros(n_groups * T))
    b.add_eq("balance", np.tile(tt, n_groups), g_idx.ravel(), np.ones(n_groups * T), np.zeros(T))

    gg, gt, gk = np.meshgrid(np.arange(n_groups), tt, np.arange(M), indexing="ij")
    gvals = cols[gk, gg]
    gkeep = gvals != 0.0

    if mechanism is Mechanism.LOCATIONAL:
        nus = np.stack([cmap.bound_at(t) for t in range(T)])
        b.add_ineq("grid", (gt * M + gk)[gkeep], g_idx[gg, gt][gkeep], gvals[gkeep], nus.ravel())

    elif mechanism is Mechanism.UNIFORM_DOE:
        ii, tt_, kk = np.meshgrid(np.arange(N), tt, np.arange(M), indexing="ij")
        vals = C[kk, ii]
        keep = vals != 0.0
        bad = (~keep) & (w.transpose(1, 0, 2) < 0)
        if bad.any():
            who = sorted(set(np.nonzero(bad)[0].tolist()))
            raise MarketInfeasible(
                "an envelope share is negative on a row the prosumer cannot influence",
                prosumers=who,
                explanation=REMARK_DOE,
            )
        ri, rt, rk = ii[keep], tt_[keep], kk[keep]
        b.add_ineq("doe", np.arange(ri.size), p_idx[ri, rt], vals[keep], w[rt, ri, rk])
        layout.row_maps["doe"] = np.stack([ri, rt, rk], axis=1)

    elif mechanism is Mechanism.UNIFORM_LIMIT:
        m_idx = b.variables("envelope_use", N * T * M).reshape(N, T, M)
        layout.l = m_idx
        ii, tt_, kk = np.meshgrid(np.arange(N), tt, np.arange(M), indexing="ij")
        b.add_ineq("limit", np.arange(N * T * M), m_idx.ravel(), np.ones(N * T * M),
                   w.transpose(1, 0, 2).ravel())
        b.add_eq(
            "limit_balance",
            np.concatenate([(tt_ * M + kk).ravel(), (gt * M + gk)[gkeep]]),
            np.concatenate([m_idx.ravel(), g_idx[gg, gt][gkeep]]),
            np.concatenate([np.ones(N * T * M), -gvals[gkeep]]),
            np.zeros(T * M),
        )
    return b.build(), layout


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class PriceSet:
    """Prices in cents per p.u. of power per step (limit prices per unit of constraint)."""

    alpha: np.ndarray
    beta: Optional[np.ndarray] = None
    locational: Optional[np.ndarray] = None
    nodal: Optional[np.ndarray] = None
    xi_upper: Optional[np.ndarray] = None
    xi_lower: Optional[np.ndarray] = None

    def energy(self, i: int) -> np.ndarray:
        """Energy price seen by prosumer i over the horizon."""
        return self.alpha if self.locational is None else self.locational[i]


@dataclass(frozen=True)
class ClearingResult:
    mechanism: Mechanism
    P: np.ndarray
    U: tuple
    X: tuple
    L: Optional[np.ndarray]
    welfare: float
    prices: PriceSet
    energy_income: np.ndarray
    limit_income: np.ndarray
    budget: np.ndarray
    status: Status
    kkt: KKTResiduals
    iterations: int
    duals: dict
    w: Optional[np.ndarray] = None
    cmap: Optional[AffineConstraintMap] = None

    @property
    def incomes(self) -> np.ndarray:
        return self.energy_income + self.limit_income

    @property
    def budget_total(self) -> float:
        return float(self.budget.sum())


def _income_terms(P, L, prices: PriceSet):
    N, T = P.shape
    lam = np.stack([prices.energy(i) for i in range(N)])
    energy = np.sum(lam * P, axis=1)
    limit = np.zeros(N)
    if L is not None and prices.beta is not None:
        limit = np.einsum("itk,tk->i", L, prices.beta)
    budget = -np.sum(lam * P, axis=0)
    if L is not None and prices.beta is not None:
        budget = budget - np.einsum("itk,tk->t", L, prices.beta)
    return energy, limit, budget


def _finish(mechanism, sol: Solution, layout: _Layout, fleet, cmap, w, feeder):
    N, T, M = fleet.N, fleet.horizon, cmap.M
    x = sol.x
    P = x[layout.p]
    U = tuple(x[u] for u in layout.u)
    X = tuple(x[s] for s in layout.x)
    L = None
    if layout.l is not None:
        L = x[layout.l] - P[:, :, None] * cmap.coeffs.T[:, None, :]
    y_bal = sol.eq_dual("balance")
    alpha = -y_bal
    duals = {"balance": y_bal.copy()}
    if "cap" in sol.program.ineq_blocks:
        duals["cap"] = sol.ineq_dual("cap").reshape(N, T)
    prices = PriceSet(alpha=alpha)
    if mechanism is Mechanism.LOCATIONAL:
        z = sol.ineq_dual("grid").reshape(T, M)
        duals["grid"] = z
        lam = alpha[None, :] - cmap.coeffs.T @ z.T
        kwargs = {}
        if feeder is not None and M == 2 * feeder.node_count:
            n = feeder.node_count
            node_map = voltage_constraint_map(feeder)
            kwargs = dict(
                nodal=alpha[None, :] - node_map.coeffs.T @ z.T,
                xi_upper=z[:, :n],
                xi_lower=z[:, n:],
            )
        prices = PriceSet(alpha=alpha, locational=lam, **kwargs)
    elif mechanism is Mechanism.UNIFORM_DOE:
        zd = np.zeros((N, T, M))
        rm = layout.row_maps["doe"]
        zd[rm[:, 0], rm[:, 1], rm[:, 2]] = sol.ineq_dual("doe")
        duals["doe"] = zd
    else:
        y_lb = sol.eq_dual("limit_balance").reshape(T, M)
        duals["limit_balance"] = y_lb
        duals["limit"] = sol.ineq_dual("limit").reshape(N, T, M)
        prices = PriceSet(alpha=alpha, beta=-y_lb)
    energy, limit, budget = _income_terms(P, L, prices)
    return ClearingResult(
        mechanism=mechanism,
        P=P,
        U=U,
        X=X,
        L=L,
        welfare=-sol.objective,
        prices=prices,
        energy_income=energy,
        limit_income=limit,
        budget=budget,
        status=sol.status,
        kkt=sol.kkt,
        iterations=sol.iterations,
        duals=duals,
        w=w,
        cmap=cmap,
    )


def _ranked_prosumers(sol: Solution, layout: _Layout, fleet, block: str):
    cert = sol.certificate or {}
    z = cert.get("farkas_z")
    if z is None or block not in sol.program.ineq_blocks or block == "grid":
        return []
    weights = np.abs(z[sol.program.ineq_blocks[block]])
    per = np.zeros(fleet.N)
    if block == "doe":
        np.add.at(per, layout.row_maps["doe"][:, 0], weights)
    else:
        per += weights.reshape(fleet.N, -1).sum(axis=1)
    order = np.argsort(-per, kind="stable")
    return [int(i) for i in order if per[i] > 1e-9 * max(per.max(), 1e-300)]


def _solve_market(mechanism, feeder, fleet, w, cmap, tol):
    cmap = _prosumer_map(feeder, fleet, cmap)
    if w is not None:
        w = np.asarray(w, dtype=float)
        if w.shape != (fleet.horizon, fleet.N, cmap.M):
            raise ValueError("envelope shares must have shape (T, N, M)")
    program, layout = _build_market(fleet, cmap, mechanism, w)
    sol = solve(program, tol=tol)
    if sol.status is Status.INFEASIBLE:
        block = {"uniform-doe": "doe", "uniform-limit": "limit", "locational": "grid"}[mechanism.value]
        who = _ranked_prosumers(sol, layout, fleet, block)
        if not who:
            who = _ranked_prosumers(sol, layout, fleet, "cap")
        raise MarketInfeasible(
            f"{mechanism.value} clearing is infeasible: {sol.message}",
            sol,
            prosumers=who,
            explanation=REMARK_DOE if mechanism is Mechanism.UNIFORM_DOE else "",
        )
    sol.raise_for_status()
    return _finish(mechanism, sol, layout, fleet, cmap, w, feeder)


def _shares(allocation):
    return allocation.w if isinstance(allocation, EnvelopeAllocation) else np.asarray(allocation)


def clear_locational(feeder: FeederModel, fleet: ProsumerFleet, cmap=None, tol=MARKET_TOL) -> ClearingResult:
    """Welfare maximisation under power balance and the global voltage band."""
    return _solve_market(Mechanism.LOCATIONAL, feeder, fleet, None, cmap, tol)


def clear_uniform_doe(feeder, fleet, allocation, cmap=None, tol=MARKET_TOL) -> ClearingResult:
    """Welfare maximisation with every prosumer confined to its own envelope."""
    return _solve_market(Mechanism.UNIFORM_DOE, feeder, fleet, _shares(allocation), cmap, tol)


def clear_uniform_limit(feeder, fleet, allocation, cmap=None, tol=MARKET_TOL) -> ClearingResult:
    """Welfare maximisation where unused envelope headroom is traded."""
    return _solve_market(Mechanism.UNIFORM_LIMIT, feeder, fleet, _shares(allocation), cmap, tol)


def clear(mechanism, feeder, fleet, allocation=None, cmap=None, tol=MARKET_TOL) -> ClearingResult:
    mechanism = Mechanism(mechanism)
    if mechanism is Mechanism.LOCATIONAL:
        return clear_locational(feeder, fleet, cmap, tol)
    if allocation is None:
        raise ValueError(f"{mechanism.value} needs an envelope allocation")
    fn = clear_uniform_doe if mechanism is Mechanism.UNIFORM_DOE else clear_uniform_limit
    return fn(feeder, fleet, allocation, cmap, tol)


# ---------------------------------------------------------------------------
# individual problems


@dataclass(frozen=True)
class BestResponse:
    U: np.ndarray
    X: np.ndarray
    p: np.ndarray
    l: Optional[np.ndarray]
    payoff: float


def trade_box(pr: ProsumerParams, extra: float = 0.0) -> float:
    """Generous bound on trade magnitude used to keep individual problems bounded."""
    u_span = np.maximum(np.abs(pr.u_lower), np.abs(pr.u_upper))
    u_span = np.where(np.isfinite(u_span), u_span, 0.0)
    scale = np.abs(pr.net_supply).max() + np.abs(pr.energy_coeffs) @ u_span + abs(pr.energy_offset)
    return 10.0 * (1.0 + scale + extra)


def best_response(
    prosumer: ProsumerParams,
    prices,
    beta=None,
    w=None,
    coeffs=None,
    p_box: Optional[float] = None,
    l_box: Optional[float] = None,
    tol=MARKET_TOL,
) -> BestResponse:
    """Payoff-maximising plan of one price-taking prosumer.

    ``prices`` is the energy price per step.  With ``w`` and ``coeffs`` the
    prosumer is confined to its envelope; adding ``beta`` lets it trade
    envelope headroom l(t) <= w(t) - coeffs p(t) at those prices instead.
    Trades are boxed below by ``p_box`` and ``l_box``.
    """
    T = prosumer.T
    prices = np.asarray(prices, dtype=float)
    b = ProgramBuilder()
    p = b.variables("p", T)
    u_list, x_list = _add_prosumers(b, [prosumer], p[None, :])
    b.add_linear(p, -prices)
    p_box = trade_box(prosumer) if p_box is None else p_box
    b.add_ineq("p_box", np.arange(T), p, -np.ones(T), np.full(T, p_box))
    l = None
    if w is not None:
        w = np.asarray(w, dtype=float)
        coeffs = np.asarray(coeffs, dtype=float)
        M = coeffs.shape[0]
        kk = np.tile(np.arange(M), T)
        tt = np.repeat(np.arange(T), M)
        if beta is None:
            keep = coeffs[kk] != 0
            if np.any((~keep) & (w.ravel() < 0)):
                raise InfeasibleError("envelope excludes every trade")
            b.add_ineq("doe", np.arange(keep.sum()), p[tt[keep]], coeffs[kk[keep]], w.ravel()[keep])
        else:
            l = b.variables("l", T * M)
            beta = np.asarray(beta, dtype=float)
            b.add_linear(l, -beta.ravel())
            rows = np.arange(T * M)
            keep = coeffs[kk] != 0
            b.add_ineq(
                "limit",
                np.concatenate([rows, rows[keep]]),
                np.concatenate([l, p[tt[keep]]]),
                np.concatenate([np.ones(T * M), coeffs[kk[keep]]]),
                w.ravel(),
            )
            if l_box is None:
                l_box = 10.0 * (1.0 + np.abs(w).max() + np.abs(coeffs).max() * p_box)
            b.add_ineq("l_box", rows, l, -np.ones(T * M), np.full(T * M, l_box))
    sol = solve(b.build(), tol=tol)
    sol.raise_for_status()
    U = sol.x[u_list[0]]
    X = sol.x[x_list[0]]
    pv = sol.x[p]
    lv = sol.x[l].reshape(T, -1) if l is not None else None
    value = payoff(prosumer, U, pv, prices, beta, lv)
    return BestResponse(U, X, pv, lv, value)


def best_responses(result: ClearingResult, fleet: ProsumerFleet, threads: Optional[int] = None, **kw):
    """Best responses of every prosumer to the prices in ``result``, in fleet order."""

    def one(i):
        pr = fleet[i]
        kwargs = dict(kw)
        if "p_box" not in kwargs:
            kwargs["p_box"] = trade_box(pr, extra=float(np.abs(result.P).max()))
        if result.mechanism is Mechanism.LOCATIONAL:
            return best_response(pr, result.prices.energy(i), **kwargs)
        coeffs = result.cmap.coeffs[:, i]
        beta = result.prices.beta if result.mechanism is Mechanism.UNIFORM_LIMIT else None
        if beta is not None and "l_box" not in kwargs:
            kwargs["l_box"] = 10.0 * (1.0 + np.abs(result.L).max() + np.abs(result.w).max()
                                      + np.abs(coeffs).max() * kwargs["p_box"])
        return best_response(pr, result.prices.alpha, beta=beta, w=result.w[:, i, :], coeffs=coeffs, **kwargs)

    n = threads or worker_count()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(one, range(fleet.N)))
    return [one(i) for i in range(fleet.N)]


# ---------------------------------------------------------------------------
# settlement


@dataclass(frozen=True)
class Settlement:
    mechanism: Mechanism
    energy_income: np.ndarray
    limit_income: np.ndarray
    budget: np.ndarray
    scale: float
    tol: float

    @property
    def incomes(self) -> np.ndarray:
        return self.energy_income + self.limit_income

    @property
    def total(self) -> float:
        return float(self.budget.sum())

    @property
    def weakly_balanced(self) -> bool:
        return bool(np.all(self.budget >= -self.tol * self.scale))

    @property
    def strongly_balanced(self) -> bool:
        return bool(np.all(np.abs(self.budget) <= self.tol * self.scale))


def payment_scale(result: ClearingResult) -> float:
    """Gross value traded, the yardstick for budget tolerances."""
    N = result.P.shape[0]
    lam = np.stack([result.prices.energy(i) for i in range(N)])
    gross = float(np.sum(np.abs(lam * result.P)))
    if result.L is not None and result.prices.beta is not None:
        gross += float(np.sum(np.abs(result.L * result.prices.beta[None, :, :])))
    return max(1.0, gross)


def settle(result: ClearingResult, tol: float = 1e-6) -> Settlement:
    """Per-prosumer incomes and the coordinator's per-step budget.

    The budget is what the coordinator keeps: minus the sum of all payments
    to prosumers.
    """
    return Settlement(
        mechanism=result.mechanism,
        energy_income=result.energy_income,
        limit_income=result.limit_income,
        budget=result.budget,
        scale=payment_scale(result),
        tol=tol,
    )


def construct_limit_trades(P, w, cmap: AffineConstraintMap) -> np.ndarray:
    """Limit trades l_i = w_i - g_i(p_i) + (sum_j g_j(p_j) - sum_j w_j) / N.

    They balance exactly and respect every prosumer's limit whenever P
    satisfies the global constraints.
    """
    P = np.asarray(P, dtype=float)
    w = np.asarray(w, dtype=float)
    N = P.shape[0]
    g = P[:, :, None] * cmap.coeffs.T[:, None, :]
    wi = w.transpose(1, 0, 2)
    excess = (g.sum(axis=0) - wi.sum(axis=0)) / N
    return wi - g + excess[None, :, :]


def with_prices(result: ClearingResult, **changes) -> ClearingResult:
    """Copy of ``result`` with altered prices and recomputed incomes."""
    prices = replace(result.prices, **changes)
    energy, limit, budget = _income_terms(result.P, result.L, prices)
    return replace(result, prices=prices, energy_income=energy, limit_income=limit, budget=budget)


def with_injections(result: ClearingResult, P) -> ClearingResult:
    energy, limit, budget = _income_terms(P, result.L, result.prices)
    return replace(result, P=np.asarray(P, dtype=float), energy_income=energy, limit_income=limit, budget=budget)
