"""Radial feeder model: topology checks, LinDistFlow sensitivities and voltage maps.

Squared voltages are in (p.u.)^2 and powers in p.u. of the scenario's base
apparent power.  Node 0 is the feeder head; nodes 1..N host prosumers.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class TopologyError(ValueError):
    pass


class CycleDetected(TopologyError):
    pass


class DisconnectedNode(TopologyError):
    pass


class DuplicateEdge(TopologyError):
    pass


class BalanceViolated(ValueError):
    pass


@dataclass(frozen=True)
class Line:
    from_node: int
    to_node: int
    resistance: float
    reactance: float = 0.0

    def __post_init__(self):
        if self.resistance < 0 or self.reactance < 0:
            raise ValueError(f"line {self.from_node}-{self.to_node} has negative impedance")
        if self.from_node == self.to_node:
            raise CycleDetected(f"self loop at node {self.from_node}")


@dataclass(frozen=True)
class Topology:
    """Validated radial tree.

    ``lines`` are re-oriented away from the root.  ``parent[j]`` and
    ``parent_line[j]`` give the upstream node and line of node j (-1 at the
    root); ``paths[j]`` lists the line indices from the root to j.
    """

    node_count: int
    lines: tuple
    parent: tuple
    parent_line: tuple
    paths: tuple
    order: tuple

    def incidence(self) -> np.ndarray:
        """Line-by-node matrix with entry 1 when the line lies on the node's root path."""
        inc = np.zeros((len(self.lines), self.node_count))
        for j in range(1, self.node_count + 1):
            inc[list(self.paths[j]), j - 1] = 1.0
        return inc


def validate_radial(lines: Sequence[Line], node_count: int) -> Topology:
    """Check that ``lines`` form a tree on nodes 0..node_count rooted at 0."""
    if node_count < 1:
        raise TopologyError("a feeder needs at least one prosumer node")
    seen = set()
    adj: dict[int, list[int]] = {k: [] for k in range(node_count + 1)}
    for idx, ln in enumerate(lines):
        for v in (ln.from_node, ln.to_node):
            if not 0 <= v <= node_count:
                raise TopologyError(f"node id {v} outside 0..{node_count}")
        key = frozenset((ln.from_node, ln.to_node))
        if key in seen:
            raise DuplicateEdge(f"duplicate line between {ln.from_node} and {ln.to_node}")
        seen.add(key)
        adj[ln.from_node].append(idx)
        adj[ln.to_node].append(idx)

    parent = [-1] * (node_count + 1)
    parent_line = [-1] * (node_count + 1)
    visited = [False] * (node_count + 1)
    visited[0] = True
    order = [0]
    queue = deque([0])
    used = set()
    while queue:
        u = queue.popleft()
        for idx in adj[u]:
            if idx in used:
                continue
            used.add(idx)
            ln = lines[idx]
            v = ln.to_node if ln.from_node == u else ln.from_node
            if visited[v]:
                raise CycleDetected(f"line {ln.from_node}-{ln.to_node} closes a loop")
            visited[v] = True
            parent[v] = u
            parent_line[v] = idx
            order.append(v)
            queue.append(v)
    missing = [k for k in range(node_count + 1) if not visited[k]]
    if missing:
        if len(lines) >= node_count:
            raise CycleDetected(f"edge set contains a loop; nodes {missing} unreachable")
        raise DisconnectedNode(f"nodes {missing} are not connected to the feeder head")

    oriented = []
    for idx, ln in enumerate(lines):
        if parent[ln.to_node] == ln.from_node and parent_line[ln.to_node] == idx:
            oriented.append(ln)
        else:
            oriented.append(Line(ln.to_node, ln.from_node, ln.resistance, ln.reactance))

    paths: list[tuple] = [()] * (node_count + 1)
    for v in order[1:]:
        paths[v] = paths[parent[v]] + (parent_line[v],)
    return Topology(
        node_count=node_count,
        lines=tuple(oriented),
        parent=tuple(parent),
        parent_line=tuple(parent_line),
        paths=tuple(paths),
        order=tuple(order),
    )


def build_sensitivities(topology: Topology) -> tuple[np.ndarray, np.ndarray]:
    """Return (R, X) with R_ik = 2 * (resistance shared by the root paths of i and k)."""
    inc = topology.incidence()
    r = np.array([ln.resistance for ln in topology.lines])
    x = np.array([ln.reactance for ln in topology.lines])
    R = 2.0 * inc.T @ (r[:, None] * inc)
    X = 2.0 * inc.T @ (x[:, None] * inc)
    return R, X


@dataclass(frozen=True)
class FeederModel:
    topology: Topology
    v0: float
    v_lower: np.ndarray
    v_upper: np.ndarray
    R: np.ndarray
    X: np.ndarray
    s_base_kva: float = 100.0

    def __post_init__(self):
        n = self.topology.node_count
        for name in ("v_lower", "v_upper"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (np.all(self.v_lower < self.v0) and np.all(self.v0 < self.v_upper)):
            raise ValueError("voltage bounds must bracket the feeder voltage strictly")
        for name in ("R", "X"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_lines(
        cls,
        lines: Sequence[Line],
        node_count: int,
        v0: float = 1.0,
        v_lower=0.95**2,
        v_upper=1.05**2,
        s_base_kva: float = 100.0,
    ) -> "FeederModel":
        topo = validate_radial(lines, node_count)
        R, X = build_sensitivities(topo)
        lo = np.broadcast_to(np.asarray(v_lower, dtype=float), (node_count,)).copy()
        hi = np.broadcast_to(np.asarray(v_upper, dtype=float), (node_count,)).copy()
        return cls(topo, float(v0), lo, hi, R, X, float(s_base_kva))

    @property
    def node_count(self) -> int:
        return self.topology.node_count

    @property
    def lines(self) -> tuple:
        return self.topology.lines


def voltages_from_injections(model: FeederModel, p, q=None) -> np.ndarray:
    """Squared voltages v = v0 + R p + X q.  ``p`` may carry a trailing time axis."""
    p = np.asarray(p, dtype=float)
    n = model.node_count
    if p.shape[0] != n:
        raise ValueError(f"expected {n} nodal injections, got {p.shape[0]}")
    v = model.v0 + model.R @ p
    if q is not None:
        q = np.asarray(q, dtype=float)
        if q.shape != p.shape:
            raise ValueError("p and q shapes differ")
        v = v + model.X @ q
    return v


def line_flows(model: FeederModel, p, q=None, tol: float = 1e-9):
    """Sending-end flows (P_ij, Q_ij) per oriented line of an islanded feeder."""
    p = np.asarray(p, dtype=float)
    if p.shape != (model.node_count,):
        raise ValueError(f"expected {model.node_count} nodal injections")
    q = np.zeros_like(p) if q is None else np.asarray(q, dtype=float)
    if abs(p.sum()) > tol or abs(q.sum()) > tol:
        raise BalanceViolated(f"net injection {p.sum():.3e} is not balanced")
    inc = model.topology.incidence()
    return -inc @ p, -inc @ q


@dataclass(frozen=True)
class AffineConstraintMap:
    """Separable affine grid constraints: sum_i coeffs[:, i] * p_i <= bound.

    Column i of ``coeffs`` is the vector c_i of agent i, so g_i(p_i) = c_i p_i.
    ``bound`` is either one vector or one vector per timestep.
    """

    coeffs: np.ndarray
    bound: np.ndarray
    labels: tuple = field(default=())

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        b = np.asarray(self.bound, dtype=float)
        if c.ndim != 2 or b.shape[-1] != c.shape[0]:
            raise ValueError("coefficient rows and bound length disagree")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "bound", b)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"row{k}" for k in range(c.shape[0])))

    @property
    def M(self) -> int:
        return self.coeffs.shape[0]

    @property
    def agents(self) -> int:
        return self.coeffs.shape[1]

    def bound_at(self, t: int) -> np.ndarray:
        return self.bound if self.bound.ndim == 1 else self.bound[t]

    def g(self, i: int, p_i):
        """Contribution of agent i; ``p_i`` may be a scalar or a vector over time."""
        return np.multiply.outer(np.asarray(p_i, dtype=float), self.coeffs[:, i])

    def total(self, p) -> np.ndarray:
        """F(p) = sum_i g_i(p_i); ``p`` has shape (agents,) or (agents, T)."""
        return (self.coeffs @ np.asarray(p, dtype=float)).T

    def for_agents(self, columns) -> "AffineConstraintMap":
        """Map whose agent j uses column ``columns[j]`` of this one."""
        return AffineConstraintMap(self.coeffs[:, np.asarray(columns, dtype=int)], self.bound, self.labels)


def voltage_constraint_map(model: FeederModel) -> AffineConstraintMap:
    """Upper and lower voltage limits stacked as 2N separable affine rows over nodes."""
    R = model.R
    coeffs = np.vstack([R, -R])
    bound = np.concatenate([model.v_upper - model.v0, model.v0 - model.v_lower])
    n = model.node_count
    labels = tuple(f"v_upper[{k}]" for k in range(1, n + 1)) + tuple(
        f"v_lower[{k}]" for k in range(1, n + 1)
    )
    return AffineConstraintMap(coeffs, bound, labels)


def read_topology_csv(path) -> list[Line]:
    lines = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"from", "to", "r_pu", "x_pu"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain from,to,r_pu,x_pu")
        for row in reader:
            lines.append(Line(int(row["from"]), int(row["to"]), float(row["r_pu"]), float(row["x_pu"])))
    return lines


def write_topology_csv(lines: Sequence[Line], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from", "to", "r_pu", "x_pu"])
        for ln in lines:
            w.writerow([ln.from_node, ln.to_node, repr(float(ln.resistance)), repr(float(ln.reactance))])


def read_bounds_csv(path, node_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-node linear p.u. bounds, returned squared."""
    lo = np.full(node_count, np.nan)
    hi = np.full(node_count, np.nan)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            k = int(row["node"])
            lo[k - 1] = float(row["v_lower_pu"]) ** 2
            hi[k - 1] = float(row["v_upper_pu"]) ** 2
    if np.isnan(lo).any():
        raise ValueError(f"{path}: bounds missing for some nodes")
    return lo, hi


# Reference 13-node layout: feeder head plus 12 nodes.  The transformer between
# nodes 2 and 3 and the switch between nodes 6 and 7 are modelled as short lines.
# Lengths follow the common 4.16 kV test-feeder layout in feet.
IEEE13_EDGES = (
    (0, 1, 2000.0),
    (1, 2, 500.0),
    (2, 3, 50.0),
    (1, 4, 500.0),
    (4, 5, 300.0),
    (1, 6, 2000.0),
    (6, 7, 10.0),
    (7, 8, 500.0),
    (6, 9, 300.0),
    (9, 10, 300.0),
    (9, 11, 800.0),
    (6, 12, 1000.0),
)


def ieee13_lines(
    s_base_kva: float = 100.0,
    v_base_kv: float = 4.16,
    r_ohm_per_mile: float = 0.3465,
    x_ohm_per_mile: float = 1.0179,
    scale: float = 1.0,
) -> list[Line]:
    """Lines of the 13-node layout in p.u. of ``s_base_kva`` and ``v_base_kv``."""
    z_base = v_base_kv**2 * 1000.0 / s_base_kva
    out = []
    for a, b, feet in IEEE13_EDGES:
        miles = feet / 5280.0
        out.append(Line(a, b, scale * r_ohm_per_mile * miles / z_base, scale * x_ohm_per_mile * miles / z_base))
    return out
