"""Scenario files, unit conversion and the synthetic scenario generator.

A scenario is a TOML file that references a topology CSV, a prosumer
parameter file (TOML) and a net-supply profile CSV.  Files carry kW, kWh and
cents; everything is converted to per-unit exactly once, when the scenario
is compiled into a feeder model and a fleet.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import re
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .feeder import FeederModel, Line, ieee13_lines, read_bounds_csv, read_topology_csv, write_topology_csv
from .prosumer import ProsumerFleet, storage_prosumer

MECHANISMS = ("locational", "uniform-doe", "uniform-limit")
DEFAULT_TOLERANCES = {"solve": 1e-10, "accept": 1e-6, "verify": 1e-5}


class ParseError(ValueError):
    def __init__(self, path, message, line=None, column=None):
        where = f"{path}:{line}:{column}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path, self.line, self.column = path, line, column


class ValidationError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ProsumerSpec:
    """One prosumer in file units (kW, kWh, cents)."""

    id: str
    node: int
    capacity_kwh: tuple
    x0_kwh: tuple
    rate_kw: float = 6.6
    efficiency: float = 0.9
    soc_bounds: tuple = (0.2, 0.85)
    target_fraction: float = 0.85
    input_weight: float = 0.1
    state_weight: tuple = (0.0,)
    terminal_weight: tuple = (0.0,)
    windows: tuple = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "node": self.node,
            "capacity_kwh": list(self.capacity_kwh),
            "x0_kwh": list(self.x0_kwh),
            "rate_kw": self.rate_kw,
            "efficiency": self.efficiency,
            "soc_bounds": list(self.soc_bounds),
            "target_fraction": self.target_fraction,
            "input_weight": self.input_weight,
            "state_weight": list(self.state_weight),
            "terminal_weight": list(self.terminal_weight),
            "windows": [list(w) for w in self.windows],
        }


@dataclass(frozen=True)
class Scenario:
    name: str
    horizon: int
    step_hours: float
    s_base_kva: float
    lines: tuple
    node_count: int
    v0_pu: float
    v_lower_pu: np.ndarray
    v_upper_pu: np.ndarray
    prosumers: tuple
    profiles_kw: np.ndarray
    epsilon: float = 1e-4
    objective_mode: str = "sqnorm"
    mechanisms: tuple = MECHANISMS
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    seed: Optional[int] = None
    source: Optional[Path] = None

    @property
    def N(self) -> int:
        return len(self.prosumers)

    def feeder(self) -> FeederModel:
        return FeederModel.from_lines(
            list(self.lines),
            self.node_count,
            v0=self.v0_pu**2,
            v_lower=np.asarray(self.v_lower_pu) ** 2,
            v_upper=np.asarray(self.v_upper_pu) ** 2,
            s_base_kva=self.s_base_kva,
        )

    def fleet(self) -> ProsumerFleet:
        base = self.s_base_kva
        out = []
        for k, spec in enumerate(self.prosumers):
            windows = [tuple(w) if len(w) == 2 else None for w in spec.windows] or None
            out.append(
                storage_prosumer(
                    self.profiles_kw[k] / base,
                    np.asarray(spec.capacity_kwh) / base,
                    np.asarray(spec.x0_kwh) / base,
                    node=spec.node,
                    rate=spec.rate_kw / base,
                    efficiency=spec.efficiency,
                    step_hours=self.step_hours,
                    soc_bounds=tuple(spec.soc_bounds),
                    target_fraction=spec.target_fraction,
                    input_weight=spec.input_weight * base**2,
                    state_weights=np.asarray(spec.state_weight) * base**2,
                    terminal_weights=np.asarray(spec.terminal_weight) * base**2,
                    windows=windows,
                    name=spec.id,
                )
            )
        return ProsumerFleet(tuple(out), self.horizon, self.step_hours)

    def price_to_cents_per_kwh(self, price):
        """Internal prices (cents per p.u. per step) in cents per kWh."""
        return np.asarray(price) / (self.s_base_kva * self.step_hours)

    def power_to_kw(self, p):
        return np.asarray(p) * self.s_base_kva

    def fingerprint(self) -> str:
        """Hash of every input that affects the solution."""
        h = hashlib.sha256()
        h.update(_scenario_toml(self, "feeder.csv", "prosumers.toml", "profiles.csv").encode())
        h.update(_topology_text(self).encode())
        h.update(_prosumers_toml(self).encode())
        h.update(_profiles_text(self).encode())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# loading


def _read_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        col = getattr(exc, "colno", None)
        if line is None:
            m = re.search(r"line (\d+), column (\d+)", str(exc))
            if m:
                line, col = int(m.group(1)), int(m.group(2))
        raise ParseError(path, str(exc), line, col) from exc


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ValidationError(f"{where}.{key}", "missing required field")
    return table[key]


def _resolve(base: Path, ref, field_name: str) -> Path:
    if not isinstance(ref, str) or not ref:
        raise ValidationError(field_name, "expected a file name")
    path = (base / ref).resolve()
    if not path.exists():
        raise ValidationError(field_name, f"file {ref!r} does not exist")
    return path


def _read_profiles(path: Path, ids: list, horizon: int) -> np.ndarray:
    index = {pid: k for k, pid in enumerate(ids)}
    out = np.full((len(ids), horizon), np.nan)
    with open(path, newline="") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(rows)
    if reader.fieldnames is None or set(reader.fieldnames) != {"prosumer_id", "t", "net_supply_kw"}:
        raise ValidationError("fleet.profiles", "header must be prosumer_id,t,net_supply_kw")
    for row in reader:
        pid, t = row["prosumer_id"], int(row["t"])
        if pid not in index:
            raise ValidationError("fleet.profiles", f"unknown prosumer {pid!r}")
        if not 0 <= t < horizon:
            raise ValidationError("fleet.profiles", f"step {t} outside 0..{horizon - 1}")
        out[index[pid], t] = float(row["net_supply_kw"])
    if np.isnan(out).any():
        raise ValidationError("fleet.profiles", "profile missing for some (prosumer, step)")
    return out


def _spec_from_table(tbl: dict, k: int) -> ProsumerSpec:
    where = f"prosumer[{k}]"
    cap = tuple(float(c) for c in _require(tbl, "capacity_kwh", where))
    n = len(cap)

    def vec(key, default):
        raw = tbl.get(key, default)
        vals = tuple(float(v) for v in (raw if isinstance(raw, list) else [raw] * n))
        if len(vals) != n:
            raise ValidationError(f"{where}.{key}", f"expected {n} entries")
        return vals

    windows = tuple(tuple(int(v) for v in w) for w in tbl.get("windows", []))
    if windows and len(windows) != n:
        raise ValidationError(f"{where}.windows", f"expected {n} entries")
    if any(len(w) not in (0, 2) for w in windows):
        raise ValidationError(f"{where}.windows", "each window is [] or [arrival, departure]")
    spec = ProsumerSpec(
        id=str(_require(tbl, "id", where)),
        node=int(_require(tbl, "node", where)),
        capacity_kwh=cap,
        x0_kwh=vec("x0_kwh", 0.0),
        rate_kw=float(tbl.get("rate_kw", 6.6)),
        efficiency=float(tbl.get("efficiency", 0.9)),
        soc_bounds=tuple(float(v) for v in tbl.get("soc_bounds", [0.2, 0.85])),
        target_fraction=float(tbl.get("target_fraction", 0.85)),
        input_weight=float(tbl.get("input_weight", 0.1)),
        state_weight=vec("state_weight", 0.0),
        terminal_weight=vec("terminal_weight", 0.0),
        windows=windows,
    )
    if min(spec.capacity_kwh) < 0 or spec.rate_kw < 0:
        raise ValidationError(f"{where}", "capacities and rates must be nonnegative")
    if min(spec.input_weight, *spec.state_weight, *spec.terminal_weight) < 0:
        raise ValidationError(f"{where}", "utility weights must be nonnegative")
    return spec


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file and everything it references."""
    path = Path(path)
    if not path.exists():
        raise ValidationError("scenario", f"file {str(path)!r} does not exist")
    doc = _read_toml(path)
    base = path.parent
    sc = doc.get("scenario", {})
    fd = _require(doc, "feeder", "scenario file")
    fl = _require(doc, "fleet", "scenario file")
    env = doc.get("envelope", {})
    mk = doc.get("market", {})
    tol = dict(DEFAULT_TOLERANCES)
    tol.update({k: float(v) for k, v in doc.get("tolerances", {}).items()})

    horizon = int(sc.get("horizon", 48))
    if horizon < 1:
        raise ValidationError("scenario.horizon", "must be at least 1")
    step = float(sc.get("step_hours", 0.5))
    if step <= 0:
        raise ValidationError("scenario.step_hours", "must be positive")
    s_base = float(sc.get("s_base_kva", 100.0))
    if s_base <= 0:
        raise ValidationError("scenario.s_base_kva", "must be positive")

    topo_path = _resolve(base, _require(fd, "topology", "feeder"), "feeder.topology")
    try:
        lines = read_topology_csv(topo_path)
    except (ValueError, KeyError) as exc:
        raise ValidationError("feeder.topology", str(exc)) from exc
    node_count = max(max(ln.from_node, ln.to_node) for ln in lines)
    v0 = float(fd.get("v0", 1.0))
    if "bounds" in fd:
        lo2, hi2 = read_bounds_csv(_resolve(base, fd["bounds"], "feeder.bounds"), node_count)
        v_lo, v_hi = np.sqrt(lo2), np.sqrt(hi2)
    else:
        v_lo = np.full(node_count, float(fd.get("v_lower", 0.95)))
        v_hi = np.full(node_count, float(fd.get("v_upper", 1.05)))
    if not (np.all(v_lo < v0) and np.all(v0 < v_hi)):
        raise ValidationError("feeder.v_lower/v_upper", "bounds must bracket v0")

    params_path = _resolve(base, _require(fl, "params", "fleet"), "fleet.params")
    pdoc = _read_toml(params_path)
    tables = pdoc.get("prosumer", [])
    if not tables:
        raise ValidationError("fleet.params", "no [[prosumer]] entries")
    specs = tuple(_spec_from_table(t, k) for k, t in enumerate(tables))
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValidationError("fleet.params", "prosumer ids must be unique")
    for s in specs:
        if not 1 <= s.node <= node_count:
            raise ValidationError(f"prosumer {s.id}.node", f"must lie in 1..{node_count}")
    profiles = _read_profiles(_resolve(base, _require(fl, "profiles", "fleet"), "fleet.profiles"), ids, horizon)

    mode = str(env.get("objective_mode", "sqnorm"))
    if mode not in ("sqnorm", "norm"):
        raise ValidationError("envelope.objective_mode", "must be 'sqnorm' or 'norm'")
    eps = float(env.get("epsilon", 1e-4))
    if eps <= 0:
        raise ValidationError("envelope.epsilon", "must be positive")
    mechs = tuple(mk.get("mechanisms", list(MECHANISMS)))
    for m in mechs:
        if m not in MECHANISMS:
            raise ValidationError("market.mechanisms", f"unknown mechanism {m!r}")

    scen = Scenario(
        name=str(sc.get("name", path.stem)),
        horizon=horizon,
        step_hours=step,
        s_base_kva=s_base,
        lines=tuple(lines),
        node_count=node_count,
        v0_pu=v0,
        v_lower_pu=v_lo,
        v_upper_pu=v_hi,
        prosumers=specs,
        profiles_kw=profiles,
        epsilon=eps,
        objective_mode=mode,
        mechanisms=mechs,
        tolerances=tol,
        seed=sc.get("seed"),
        source=path,
    )
    try:
        scen.feeder()
        scen.fleet()
    except ValueError as exc:
        raise ValidationError("scenario", str(exc)) from exc
    return scen


# ---------------------------------------------------------------------------
# emission


def _scenario_toml(s: Scenario, topo: str, params: str, profiles: str) -> str:
    scenario = {
        "name": s.name,
        "horizon": s.horizon,
        "step_hours": s.step_hours,
        "s_base_kva": s.s_base_kva,
    }
    if s.seed is not None:
        scenario["seed"] = int(s.seed)
    feeder = {"topology": topo, "v0": s.v0_pu}
    lo, hi = np.asarray(s.v_lower_pu), np.asarray(s.v_upper_pu)
    if np.all(lo == lo[0]) and np.all(hi == hi[0]):
        feeder["v_lower"] = float(lo[0])
        feeder["v_upper"] = float(hi[0])
    else:
        feeder["bounds"] = "bounds.csv"
    doc = {
        "scenario": scenario,
        "feeder": feeder,
        "fleet": {"params": params, "profiles": profiles},
        "envelope": {"epsilon": s.epsilon, "objective_mode": s.objective_mode},
        "market": {"mechanisms": list(s.mechanisms)},
        "tolerances": dict(s.tolerances),
    }
    return tomli_w.dumps(doc)


def _topology_text(s: Scenario) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["from", "to", "r_pu", "x_pu"])
    for ln in s.lines:
        w.writerow([ln.from_node, ln.to_node, repr(float(ln.resistance)), repr(float(ln.reactance))])
    return buf.getvalue()


def _bounds_text(s: Scenario) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node", "v_lower_pu", "v_upper_pu"])
    for k in range(s.node_count):
        w.writerow([k + 1, repr(float(s.v_lower_pu[k])), repr(float(s.v_upper_pu[k]))])
    return buf.getvalue()


def _prosumers_toml(s: Scenario) -> str:
    return tomli_w.dumps({"prosumer": [p.to_dict() for p in s.prosumers]})


def _profiles_text(s: Scenario) -> str:
    buf = io.StringIO()
    buf.write(f"# s_base_kva={s.s_base_kva!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["prosumer_id", "t", "net_supply_kw"])
    for k, spec in enumerate(s.prosumers):
        for t in range(s.horizon):
            w.writerow([spec.id, t, repr(float(s.profiles_kw[k, t]))])
    return buf.getvalue()


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_scenario(s: Scenario, directory, name: str = "scenario.toml") -> Path:
    """Write the scenario and its referenced files into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write(d / "feeder.csv", _topology_text(s))
    atomic_write(d / "prosumers.toml", _prosumers_toml(s))
    atomic_write(d / "profiles.csv", _profiles_text(s))
    lo, hi = np.asarray(s.v_lower_pu), np.asarray(s.v_upper_pu)
    if not (np.all(lo == lo[0]) and np.all(hi == hi[0])):
        atomic_write(d / "bounds.csv", _bounds_text(s))
    atomic_write(d / name, _scenario_toml(s, "feeder.csv", "prosumers.toml", "profiles.csv"))
    return d / name


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticShape:
    """Shape parameters of the synthetic net-supply and storage fleet.

    Powers in kW per prosumer, energies in kWh, weights in cents.
    ``amplitude`` scales all net-supply curves.
    """

    pv_peak_kw: float = 8.0
    base_load_kw: float = 0.6
    evening_load_kw: float = 1.5
    amplitude: float = 1.0
    capacity_max_kwh: float = 75.0
    capacity_min_kwh: float = 0.0
    rate_kw: float = 6.6
    efficiency: float = 0.9
    initial_soc: tuple = (0.2, 0.5)
    soc_bounds: tuple = (0.2, 0.85)
    input_weight: float = 0.1
    state_weight: float = 0.002
    terminal_weight: float = 0.4
    ev_share: float = 1.0

    def zero_supply(self) -> bool:
        return self.amplitude == 0 or (self.pv_peak_kw == 0 and self.base_load_kw == 0 and self.evening_load_kw == 0)


def _net_supply(rng, n, horizon, step, shape: SyntheticShape) -> np.ndarray:
    hours = (np.arange(horizon) + 0.5) * step % 24.0
    solar = np.clip(np.sin(np.pi * (hours - 6.0) / 13.0), 0.0, None) ** 1.5
    solar[(hours < 6.0) | (hours > 19.0)] = 0.0
    evening = np.exp(-0.5 * ((hours - 19.0) / 2.0) ** 2)
    pv = shape.pv_peak_kw * rng.uniform(0.5, 1.5, n)
    load = shape.base_load_kw * rng.uniform(0.5, 1.5, n)
    peak = shape.evening_load_kw * rng.uniform(0.5, 1.5, n)
    wiggle = 1.0 + 0.1 * rng.standard_normal((n, horizon))
    supply = pv[:, None] * solar[None, :] - (load[:, None] + peak[:, None] * evening[None, :]) * wiggle
    return shape.amplitude * supply


def generate_synthetic(
    seed: int,
    n_prosumers: int,
    horizon: int = 48,
    shape: Optional[SyntheticShape] = None,
    *,
    feeder: str = "ieee13",
    node_count: int = 12,
    impedance_scale: float = 1.0,
    step_hours: Optional[float] = None,
    s_base_kva: float = 100.0,
    epsilon: float = 1e4,
    name: Optional[str] = None,
) -> Scenario:
    """Deterministic synthetic scenario: solar-shaped net supply and EV plus battery storage.

    Each prosumer owns two storage units: an EV available outside a daytime
    absence window and a stationary battery.  ``feeder`` is ``"ieee13"``
    (13-node layout, prosumers spread over the nodes other than 1 and 6) or
    ``"random"`` (random tree with ``node_count`` nodes).  ``epsilon`` is the
    envelope fairness weight; with power in p.u. a weight near the library
    default lets the export objective starve distant nodes of headroom.
    """
    if n_prosumers < 1:
        raise ValueError("need at least one prosumer")
    shape = shape or SyntheticShape()
    rng = np.random.default_rng(seed)
    step = 24.0 / horizon if step_hours is None else step_hours

    if feeder == "ieee13":
        lines = ieee13_lines(s_base_kva=s_base_kva, scale=impedance_scale)
        n_nodes = 12
        hosts = [k for k in range(1, 13) if k not in (1, 6)]
    elif feeder == "random":
        n_nodes = node_count
        base = ieee13_lines(s_base_kva=s_base_kva, scale=impedance_scale)
        r_mean = float(np.mean([ln.resistance for ln in base]))
        x_mean = float(np.mean([ln.reactance for ln in base]))
        lines = []
        for k in range(1, n_nodes + 1):
            parent = int(rng.integers(0, k))
            f = float(rng.uniform(0.5, 2.0))
            lines.append(Line(parent, k, r_mean * f, x_mean * f))
        hosts = list(range(1, n_nodes + 1))
    else:
        raise ValueError(f"unknown feeder kind {feeder!r}")

    nodes = [hosts[k % len(hosts)] for k in range(n_prosumers)]
    supply = _net_supply(rng, n_prosumers, horizon, step, shape)
    caps = rng.uniform(shape.capacity_min_kwh, shape.capacity_max_kwh, (n_prosumers, 2))
    soc0 = rng.uniform(shape.initial_soc[0], shape.initial_soc[1], (n_prosumers, 2))
    leave = rng.uniform(7.0, 9.0, n_prosumers)
    back = rng.uniform(17.0, 20.0, n_prosumers)
    has_ev = rng.uniform(size=n_prosumers) < shape.ev_share

    specs = []
    for k in range(n_prosumers):
        windows = ((), ())
        if has_ev[k] and horizon * step >= 24.0:
            # EV is home before it leaves and after it is back
            windows = ((int(round(back[k] / step)), int(round(leave[k] / step))), ())
        specs.append(
            ProsumerSpec(
                id=f"p{k + 1:03d}",
                node=nodes[k],
                capacity_kwh=tuple(float(c) for c in caps[k]),
                x0_kwh=tuple(float(v) for v in soc0[k] * caps[k]),
                rate_kw=shape.rate_kw,
                efficiency=shape.efficiency,
                soc_bounds=tuple(shape.soc_bounds),
                target_fraction=shape.soc_bounds[1],
                input_weight=shape.input_weight,
                state_weight=(shape.state_weight, shape.state_weight),
                terminal_weight=(shape.terminal_weight, shape.terminal_weight),
                windows=windows if any(windows) else (),
            )
        )
    return Scenario(
        name=name or f"synthetic-{seed}",
        horizon=horizon,
        step_hours=step,
        s_base_kva=s_base_kva,
        lines=tuple(lines),
        node_count=n_nodes,
        v0_pu=1.0,
        v_lower_pu=np.full(n_nodes, 0.95),
        v_upper_pu=np.full(n_nodes, 1.05),
        prosumers=tuple(specs),
        profiles_kw=supply,
        epsilon=epsilon,
        seed=seed,
    )


def with_fleet_changes(s: Scenario, **changes) -> Scenario:
    return replace(s, **changes)
