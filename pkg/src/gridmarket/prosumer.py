"""Prosumer dynamics, bounds, quadratic utilities and payoff evaluation.

Internal units: power in p.u. of the base apparent power, energy in p.u.-hours,
money in cents.  Time runs over steps t = 0..T-1 for inputs and trades and
t = 0..T for states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class QuadraticUtility:
    """f(x, u) = -input_weight |u|^2 - sum_j state_weights[t, j] (x_j - target_j)^2.

    The terminal reward is -sum_j terminal_weights[j] (x_j(T) - target_j)^2.
    """

    input_weight: float
    state_weights: np.ndarray
    terminal_weights: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        for name in ("state_weights", "terminal_weights", "target"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.input_weight < 0 or (self.state_weights < 0).any() or (self.terminal_weights < 0).any():
            raise ValueError("utility weights must be nonnegative")

    def stage(self, t: int, x: np.ndarray, u: np.ndarray) -> float:
        d = x - self.target
        return float(-self.input_weight * u @ u - self.state_weights[t] @ (d * d))

    def terminal(self, x: np.ndarray) -> float:
        d = x - self.target
        return float(-self.terminal_weights @ (d * d))


@dataclass(frozen=True)
class ProsumerParams:
    A: np.ndarray
    B: np.ndarray
    x0: np.ndarray
    x_lower: np.ndarray
    x_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    net_supply: np.ndarray
    utility: QuadraticUtility
    energy_coeffs: Optional[np.ndarray] = None
    energy_offset: float = 0.0
    capacity: Optional[np.ndarray] = None
    availability: Optional[np.ndarray] = None
    node: int = 1
    name: str = ""

    def __post_init__(self):
        for fld in ("A", "B", "x0", "x_lower", "x_upper", "u_lower", "u_upper", "net_supply"):
            object.__setattr__(self, fld, _frozen(getattr(self, fld)))
        n, m, T = self.x0.shape[0], self.B.shape[1], self.net_supply.shape[0]
        if self.energy_coeffs is None:
            object.__setattr__(self, "energy_coeffs", np.ones(m))
        if self.capacity is None:
            object.__setattr__(self, "capacity", self.x_upper)
        if self.availability is None:
            object.__setattr__(self, "availability", np.ones((T, m), dtype=bool))
        object.__setattr__(self, "energy_coeffs", _frozen(self.energy_coeffs))
        object.__setattr__(self, "capacity", _frozen(self.capacity))
        object.__setattr__(self, "availability", _frozen(self.availability, dtype=bool))
        if self.A.shape != (n, n) or self.B.shape[0] != n:
            raise ValueError("dynamics matrices do not match the state dimension")
        if self.x_lower.shape != (n,) or self.x_upper.shape != (n,):
            raise ValueError("state bounds must have length n")
        if self.u_lower.shape != (m,) or self.u_upper.shape != (m,) or self.energy_coeffs.shape != (m,):
            raise ValueError("input bounds and energy coefficients must have length m")
        if self.availability.shape != (T, m):
            raise ValueError("availability mask must have shape (T, m)")
        if self.utility.state_weights.shape != (T, n) or self.utility.terminal_weights.shape != (n,):
            raise ValueError("utility weights do not match (T, n)")
        if (self.x_lower > self.x_upper).any() or (self.u_lower > self.u_upper).any():
            raise ValueError("lower bound above upper bound")
        tol = 1e-12 * (1.0 + np.abs(self.x0).max())
        if (self.x0 < self.x_lower - tol).any() or (self.x0 > self.x_upper + tol).any():
            raise ValueError("initial state outside its bounds")
        if self.node < 1:
            raise ValueError("prosumers sit at feeder nodes 1..N")

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def T(self) -> int:
        return self.net_supply.shape[0]

    def energy_use(self, U) -> np.ndarray:
        """h(u(t)) for every step."""
        return _as_inputs(self, U) @ self.energy_coeffs + self.energy_offset

    def trade_cap(self, U) -> np.ndarray:
        return self.net_supply - self.energy_use(U)


@dataclass(frozen=True)
class ProsumerFleet:
    prosumers: tuple
    horizon: int
    step_hours: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "prosumers", tuple(self.prosumers))
        if self.horizon < 1 or self.step_hours <= 0:
            raise ValueError("horizon must be >= 1 and step length positive")
        for k, pr in enumerate(self.prosumers):
            if pr.T != self.horizon:
                raise ValueError(f"prosumer {k} profile has length {pr.T}, expected {self.horizon}")

    @property
    def N(self) -> int:
        return len(self.prosumers)

    @property
    def nodes(self) -> np.ndarray:
        return np.array([p.node for p in self.prosumers], dtype=int)

    def __len__(self):
        return self.N

    def __iter__(self):
        return iter(self.prosumers)

    def __getitem__(self, i) -> ProsumerParams:
        return self.prosumers[i]


def _as_inputs(params: ProsumerParams, U) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    if U.shape == (params.T * params.m,):
        U = U.reshape(params.T, params.m)
    if U.shape != (params.T, params.m):
        raise ValueError(f"inputs must have shape ({params.T}, {params.m})")
    return U


def expand_trajectory(params: ProsumerParams, U, x0=None) -> np.ndarray:
    """States x(1..T) as a (T, n) array driven by inputs ``U`` of shape (T, m)."""
    U = _as_inputs(params, U)
    x = params.x0 if x0 is None else np.asarray(x0, dtype=float)
    out = np.empty((params.T, params.n))
    for t in range(params.T):
        x = params.A @ x + params.B @ U[t]
        out[t] = x
    return out


def condensed_dynamics(params: ProsumerParams) -> tuple[np.ndarray, np.ndarray]:
    """(Phi, Gamma) with vec(x(1..T)) = Phi x0 + Gamma vec(U)."""
    n, m, T = params.n, params.m, params.T
    Phi = np.zeros((T * n, n))
    Gamma = np.zeros((T * n, T * m))
    powers = [np.eye(n)]
    for _ in range(T):
        powers.append(params.A @ powers[-1])
    for t in range(1, T + 1):
        Phi[(t - 1) * n : t * n] = powers[t]
        for j in range(t):
            Gamma[(t - 1) * n : t * n, j * m : (j + 1) * m] = powers[t - j - 1] @ params.B
    return Phi, Gamma


def utility_value(params: ProsumerParams, U, X=None) -> float:
    """Sum of stage utilities plus the terminal reward."""
    U = _as_inputs(params, U)
    X = expand_trajectory(params, U) if X is None else np.asarray(X, dtype=float)
    util = params.utility
    total = util.stage(0, params.x0, U[0])
    for t in range(1, params.T):
        total += util.stage(t, X[t - 1], U[t])
    return total + util.terminal(X[-1])


def utility_hessian(params: ProsumerParams) -> np.ndarray:
    """Hessian of the total utility with respect to vec(U)."""
    _, Gamma = condensed_dynamics(params)
    T, n, m = params.T, params.n, params.m
    w = np.zeros((T, n))
    w[: T - 1] = params.utility.state_weights[1:]
    w[T - 1] = params.utility.terminal_weights
    return -2.0 * params.utility.input_weight * np.eye(T * m) - 2.0 * Gamma.T @ (w.ravel()[:, None] * Gamma)


def payoff(params: ProsumerParams, U, p, prices, beta=None, limits=None) -> float:
    """Utility plus trade income sum_t prices[t] p[t] (+ sum_t beta[t] . limits[t])."""
    value = utility_value(params, U) + float(np.dot(prices, p))
    if beta is not None and limits is not None:
        value += float(np.sum(np.asarray(beta) * np.asarray(limits)))
    return value


@dataclass(frozen=True)
class Violation:
    kind: str
    t: int
    index: int
    slack: float


def feasibility_check(params: ProsumerParams, U, p, tol: float = 1e-9) -> list[Violation]:
    """List every violated constraint with its (negative) slack; empty when feasible."""
    U = _as_inputs(params, U)
    p = np.asarray(p, dtype=float)
    X = expand_trajectory(params, U)
    found: list[Violation] = []

    def scan(kind, slack, offset=0):
        for t, j in zip(*np.nonzero(slack < -tol)):
            found.append(Violation(kind, int(t) + offset, int(j), float(slack[t, j])))

    scan("state_upper", params.x_upper - X, offset=1)
    scan("state_lower", X - params.x_lower, offset=1)
    scan("input_upper", params.u_upper - U)
    scan("input_lower", U - params.u_lower)
    scan("availability", np.where(params.availability, 0.0, -np.abs(U)))
    cap = params.trade_cap(U) - p
    scan("trade_cap", cap[:, None])
    return found


def storage_prosumer(
    net_supply,
    capacity,
    x0,
    *,
    node: int = 1,
    rate: float = 0.066,
    efficiency: float = 0.9,
    step_hours: float = 0.5,
    soc_bounds: tuple = (0.2, 0.85),
    target_fraction: float = 0.85,
    input_weight: float = 1.0,
    state_weights=0.0,
    terminal_weights=0.0,
    windows: Optional[Sequence] = None,
    name: str = "",
) -> ProsumerParams:
    """Prosumer with independent storage units x(t+1) = x(t) + efficiency*step*u(t).

    ``state_weights`` broadcasts to (T, n); ``windows`` holds one
    ``(arrival, departure)`` pair or None per unit, outside of which the
    unit's input is pinned to zero.  An arrival after the departure means
    the unit is present at both ends of the horizon.
    """
    net_supply = np.asarray(net_supply, dtype=float)
    capacity = np.atleast_1d(np.asarray(capacity, dtype=float))
    n, T = capacity.shape[0], net_supply.shape[0]
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (n,)).copy()
    lo, hi = soc_bounds[0] * capacity, soc_bounds[1] * capacity
    x0 = np.clip(x0, lo, hi)
    rates = np.broadcast_to(np.asarray(rate, dtype=float), (n,)).copy()
    rates[capacity <= 0] = 0.0
    avail = np.ones((T, n), dtype=bool)
    for j, win in enumerate(windows or [None] * n):
        if win is not None:
            a, d = win
            avail[:, j] = False
            if a <= d:
                avail[max(0, a) : min(T, d), j] = True
            else:
                # window wraps past the end of the horizon
                avail[: min(T, d), j] = True
                avail[max(0, a) :, j] = True
    utility = QuadraticUtility(
        input_weight=input_weight,
        state_weights=np.broadcast_to(np.asarray(state_weights, dtype=float), (T, n)),
        terminal_weights=np.broadcast_to(np.asarray(terminal_weights, dtype=float), (n,)),
        target=target_fraction * capacity,
    )
    return ProsumerParams(
        A=np.eye(n),
        B=efficiency * step_hours * np.eye(n),
        x0=x0,
        x_lower=lo,
        x_upper=hi,
        u_lower=-rates,
        u_upper=rates,
        net_supply=net_supply,
        utility=utility,
        capacity=capacity,
        availability=avail,
        node=node,
        name=name,
    )
