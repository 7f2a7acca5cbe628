"""Dynamic operating envelopes by right-hand-side decomposition.

For every timestep the shared bound nu(t) is split into per-prosumer shares
w_i(t) with sum_i w_i(t) = nu(t).  The split maximises the total export the
shares admit, lightly regularised towards the equal split nu(t)/N.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .feeder import AffineConstraintMap
from .solver import ProgramBuilder, SolverError, Status, solve


class InfeasibleAllocation(SolverError):
    pass


def worker_count(default: int = 1) -> int:
    """Thread cap from GRIDMARKET_THREADS."""
    raw = os.environ.get("GRIDMARKET_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return default


@dataclass(frozen=True)
class EnvelopeAllocation:
    """Per-timestep shares ``w[t, i, :]`` of the constraint bound."""

    w: np.ndarray
    equality_index: np.ndarray
    epsilon: float
    objective_mode: str
    objective_value: np.ndarray
    exports: np.ndarray
    cmap: AffineConstraintMap

    @property
    def horizon(self) -> int:
        return self.w.shape[0]

    @property
    def capacity(self) -> np.ndarray:
        return self.exports.sum(axis=1)

    def shares(self, i: int) -> np.ndarray:
        return self.w[:, i, :]


def _bounds_over_time(cmap: AffineConstraintMap, horizon: Optional[int]) -> np.ndarray:
    if cmap.bound.ndim == 2:
        if horizon is not None and cmap.bound.shape[0] != horizon:
            raise ValueError("bound rows do not match the horizon")
        return cmap.bound
    return np.tile(cmap.bound, (horizon or 1, 1))


def _max_exports(coeffs: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Largest p_i >= 0 with c_i p_i <= w_i, for shares w of shape (N, M)."""
    out = np.full(coeffs.shape[1], np.inf)
    for i in range(coeffs.shape[1]):
        pos = coeffs[:, i] > 0
        if pos.any():
            out[i] = np.min(w[i, pos] / coeffs[pos, i])
    return np.maximum(out, 0.0)


def _allocate_step(coeffs, nu, mode, epsilon, p_max, tol):
    M, N = coeffs.shape
    ebar = np.tile(nu / N, N)
    b = ProgramBuilder()
    p = b.variables("p", N)
    w = b.variables("w", N * M).reshape(N, M)
    b.add_linear(p, -np.ones(N))
    if mode == "sqnorm":
        b.add_quadratic(w.ravel(), w.ravel(), np.full(N * M, 2.0 * epsilon))
        b.add_linear(w.ravel(), -2.0 * epsilon * ebar)
        b.offset = epsilon * float(ebar @ ebar)
    elif mode == "norm":
        tau = b.variables("tau", 1)
        b.add_linear(tau, [epsilon])
    else:
        raise ValueError(f"unknown objective mode {mode!r}")

    rows = np.arange(N * M)
    ii = np.repeat(np.arange(N), M)
    kk = np.tile(np.arange(M), N)
    cvals = coeffs[kk, ii]
    nz = cvals != 0.0
    b.add_ineq(
        "share",
        np.concatenate([rows[nz], rows]),
        np.concatenate([p[ii[nz]], w.ravel()]),
        np.concatenate([cvals[nz], -np.ones(N * M)]),
        np.zeros(N * M),
    )
    b.add_ineq("export_floor", np.arange(N), p, -np.ones(N), np.zeros(N))
    if p_max is not None:
        b.add_ineq("export_cap", np.arange(N), p, np.ones(N), np.broadcast_to(p_max, (N,)))
    b.add_eq("decomposition", kk, w.ravel(), np.ones(N * M), nu)
    if mode == "norm":
        b.add_soc(
            "fairness",
            np.arange(N * M + 1),
            np.concatenate([tau, w.ravel()]),
            -np.ones(N * M + 1),
            np.concatenate([[0.0], -ebar]),
        )
    sol = solve(b.build(), tol=tol)
    if sol.status is Status.INFEASIBLE:
        raise InfeasibleAllocation("no decomposition of the bound exists", sol)
    sol.raise_for_status()
    shares = sol.primal("w").reshape(N, M)
    return shares, -sol.objective, sol.primal("p")


def allocate(
    cmap: AffineConstraintMap,
    objective_mode: str = "sqnorm",
    epsilon: float = 1e-4,
    horizon: Optional[int] = None,
    p_max=None,
    tol: float = 1e-9,
    threads: Optional[int] = None,
) -> EnvelopeAllocation:
    """Split each timestep's bound among the agents of ``cmap``.

    Exports are kept nonnegative: the capacity term sums max(0, p_i) and
    the split only needs to certify export headroom.  Identical bounds at
    different timesteps are solved once.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    nus = _bounds_over_time(cmap, horizon)
    T = nus.shape[0]
    N = cmap.agents
    keys = [nu.tobytes() for nu in nus]
    unique = list(dict.fromkeys(keys))
    first = {k: keys.index(k) for k in unique}

    def work(key):
        return _allocate_step(cmap.coeffs, nus[first[key]], objective_mode, epsilon, p_max, tol)

    n_workers = threads or worker_count()
    if n_workers > 1 and len(unique) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            solved = dict(zip(unique, pool.map(work, unique)))
    else:
        solved = {k: work(k) for k in unique}

    w = np.stack([solved[k][0] for k in keys])
    obj = np.array([solved[k][1] for k in keys])
    exports = np.stack([solved[k][2] for k in keys])
    return EnvelopeAllocation(
        w=w,
        equality_index=nus / N,
        epsilon=epsilon,
        objective_mode=objective_mode,
        objective_value=obj,
        exports=exports,
        cmap=cmap,
    )


def equal_split(cmap: AffineConstraintMap, horizon: Optional[int] = None) -> EnvelopeAllocation:
    """Allocation with every agent holding nu(t)/N."""
    nus = _bounds_over_time(cmap, horizon)
    N = cmap.agents
    w = np.repeat((nus / N)[:, None, :], N, axis=1)
    exports = np.stack([_max_exports(cmap.coeffs, w[t]) for t in range(w.shape[0])])
    return EnvelopeAllocation(
        w=w,
        equality_index=nus / N,
        epsilon=np.inf,
        objective_mode="equal",
        objective_value=exports.sum(axis=1),
        exports=exports,
        cmap=cmap,
    )


@dataclass(frozen=True)
class EnvelopeCheck:
    ok: bool
    slack: np.ndarray


def envelope_check(cmap: AffineConstraintMap, i: int, w_i, p_i, tol: float = 0.0) -> EnvelopeCheck:
    """g_i(p_i) - w_i; the envelope is respected when every entry is <= tol."""
    slack = cmap.g(i, p_i) - np.asarray(w_i, dtype=float)
    return EnvelopeCheck(bool(np.all(slack <= tol)), slack)


def write_envelopes_csv(allocation: EnvelopeAllocation, path, s_base_kva: float, ids=None) -> None:
    T, N, M = allocation.w.shape
    ids = list(ids) if ids is not None else list(range(1, N + 1))
    with open(path, "w", newline="") as fh:
        fh.write(f"# s_base_kva={s_base_kva!r}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "prosumer_id", "component_index", "w_value"])
        for t in range(T):
            for i in range(N):
                for k in range(M):
                    wr.writerow([t, ids[i], k, repr(float(allocation.w[t, i, k]))])


def read_envelopes_csv(path, horizon: int, agents: int, components: int) -> np.ndarray:
    w = np.full((horizon, agents, components), np.nan)
    index: dict = {}
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(lines):
        pid = row["prosumer_id"]
        if pid not in index:
            index[pid] = len(index)
        w[int(row["t"]), index[pid], int(row["component_index"])] = float(row["w_value"])
    if np.isnan(w).any():
        raise ValueError(f"{path}: envelope table is incomplete")
    return w
