"""Result bundles: one directory per output, one subdirectory per mechanism.

Layout of an output directory::

    manifest.json                 scenario reference, fingerprint, contents
    envelopes.csv, envelopes.npz  envelope allocation (when computed)
    <mechanism>/result.npz        full clearing result, internal units
    <mechanism>/*.csv             tables in kW, cents and cents/kWh

Every CSV starts with a ``# s_base_kva=...`` line followed by its header.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import astuple
from pathlib import Path
from typing import Optional

import numpy as np

from .envelope import EnvelopeAllocation, write_envelopes_csv
from .feeder import AffineConstraintMap, voltages_from_injections
from .market import ClearingResult, Mechanism, PriceSet
from .scenario import Scenario, atomic_write
from .solver import KKTResiduals, Status

MANIFEST = "manifest.json"

# file -> (header, row count description)
RESULT_TABLES = {
    "prices_energy.csv": (["t", "lambda_cents_per_kwh"], "T"),
    "prices_limits.csv": (["t", "component", "beta"], "T*M"),
    "prices_locational.csv": (["t", "node", "lambda_cents_per_kwh"], "T*nodes"),
    "injections.csv": (["t", "prosumer_id", "p_kw"], "N*T"),
    "voltages.csv": (["t", "node", "v_pu"], "T*nodes"),
    "incomes.csv": (["prosumer_id", "energy_cents", "limit_cents", "total_cents"], "N"),
    "budget.csv": (["t", "budget_cents"], "T"),
}


def _csv_text(s_base_kva: float, header, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# s_base_kva={s_base_kva!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def read_table(path) -> tuple[float, list]:
    """Rows of a result CSV as dicts, plus the base power from its first line."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# s_base_kva="):
            raise ValueError(f"{path}: missing s_base_kva header line")
        base = float(first.split("=", 1)[1])
        rows = list(csv.DictReader(fh))
    return base, rows


def nodal_voltages(scenario: Scenario, result: ClearingResult) -> np.ndarray:
    """Voltage magnitudes (nodes, T) in p.u. produced by the cleared injections."""
    feeder = scenario.feeder()
    nodes = np.array([p.node for p in scenario.prosumers])
    inj = np.zeros((scenario.node_count, result.P.shape[1]))
    np.add.at(inj, nodes - 1, result.P)
    return np.sqrt(np.maximum(voltages_from_injections(feeder, inj), 0.0))


def result_tables(scenario: Scenario, result: ClearingResult) -> dict:
    base = scenario.s_base_kva
    ids = [p.id for p in scenario.prosumers]
    T = result.P.shape[1]
    to_c = scenario.price_to_cents_per_kwh
    tabs = {}
    tabs["prices_energy.csv"] = [(t, float(v)) for t, v in enumerate(to_c(result.prices.alpha))]
    beta = result.prices.beta
    tabs["prices_limits.csv"] = (
        [(t, k, float(beta[t, k])) for t in range(T) for k in range(beta.shape[1])] if beta is not None else []
    )
    nodal = result.prices.nodal
    if nodal is None:
        nodal = np.repeat(result.prices.alpha[None, :], scenario.node_count, axis=0)
    nodal_c = to_c(nodal)
    tabs["prices_locational.csv"] = [
        (t, k + 1, float(nodal_c[k, t])) for t in range(T) for k in range(scenario.node_count)
    ]
    pkw = scenario.power_to_kw(result.P)
    tabs["injections.csv"] = [(t, ids[i], float(pkw[i, t])) for t in range(T) for i in range(len(ids))]
    v = nodal_voltages(scenario, result)
    tabs["voltages.csv"] = [(t, k + 1, float(v[k, t])) for t in range(T) for k in range(scenario.node_count)]
    tabs["incomes.csv"] = [
        (ids[i], float(result.energy_income[i]), float(result.limit_income[i]), float(result.incomes[i]))
        for i in range(len(ids))
    ]
    tabs["budget.csv"] = [(t, float(b)) for t, b in enumerate(result.budget)]
    return {name: _csv_text(base, RESULT_TABLES[name][0], rows) for name, rows in tabs.items()}


def save_result(directory, scenario: Scenario, result: ClearingResult) -> Path:
    d = Path(directory) / result.mechanism.value
    d.mkdir(parents=True, exist_ok=True)
    arrays = {
        "P": result.P,
        "welfare": np.array(result.welfare),
        "alpha": result.prices.alpha,
        "energy_income": result.energy_income,
        "limit_income": result.limit_income,
        "budget": result.budget,
        "kkt": np.array(astuple(result.kkt)),
        "iterations": np.array(result.iterations),
        "cmap_coeffs": result.cmap.coeffs,
        "cmap_bound": result.cmap.bound,
    }
    for i, (u, x) in enumerate(zip(result.U, result.X)):
        arrays[f"U_{i}"] = u
        arrays[f"X_{i}"] = x
    for name in ("beta", "locational", "nodal", "xi_upper", "xi_lower"):
        val = getattr(result.prices, name)
        if val is not None:
            arrays[f"price_{name}"] = val
    if result.L is not None:
        arrays["L"] = result.L
    if result.w is not None:
        arrays["w"] = result.w
    for k, v in result.duals.items():
        arrays[f"dual_{k}"] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = d / ".result.npz.tmp"
    tmp.write_bytes(buf.getvalue())
    tmp.replace(d / "result.npz")
    for name, text in result_tables(scenario, result).items():
        atomic_write(d / name, text)
    return d


def load_result(directory, mechanism) -> ClearingResult:
    mechanism = Mechanism(mechanism)
    path = Path(directory) / mechanism.value / "result.npz"
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    n = sum(1 for k in data if k.startswith("U_"))
    prices = PriceSet(
        alpha=data["alpha"],
        **{name: data.get(f"price_{name}") for name in ("beta", "locational", "nodal", "xi_upper", "xi_lower")},
    )
    duals = {k[5:]: v for k, v in data.items() if k.startswith("dual_")}
    return ClearingResult(
        mechanism=mechanism,
        P=data["P"],
        U=tuple(data[f"U_{i}"] for i in range(n)),
        X=tuple(data[f"X_{i}"] for i in range(n)),
        L=data.get("L"),
        welfare=float(data["welfare"]),
        prices=prices,
        energy_income=data["energy_income"],
        limit_income=data["limit_income"],
        budget=data["budget"],
        status=Status.OPTIMAL,
        kkt=KKTResiduals(*data["kkt"].tolist()),
        iterations=int(data["iterations"]),
        duals=duals,
        w=data.get("w"),
        cmap=AffineConstraintMap(data["cmap_coeffs"], data["cmap_bound"]),
    )


def save_allocation(directory, scenario: Scenario, allocation: EnvelopeAllocation) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(
        buf,
        w=allocation.w,
        equality_index=allocation.equality_index,
        epsilon=np.array(allocation.epsilon),
        objective_mode=np.array(allocation.objective_mode),
        objective_value=allocation.objective_value,
        exports=allocation.exports,
        cmap_coeffs=allocation.cmap.coeffs,
        cmap_bound=allocation.cmap.bound,
    )
    tmp = d / ".envelopes.npz.tmp"
    tmp.write_bytes(buf.getvalue())
    tmp.replace(d / "envelopes.npz")
    tmp_csv = d / ".envelopes.csv.tmp"
    write_envelopes_csv(allocation, tmp_csv, scenario.s_base_kva, [p.id for p in scenario.prosumers])
    tmp_csv.replace(d / "envelopes.csv")


def load_allocation(directory) -> Optional[EnvelopeAllocation]:
    path = Path(directory) / "envelopes.npz"
    if not path.exists():
        return None
    with np.load(path) as z:
        return EnvelopeAllocation(
            w=z["w"],
            equality_index=z["equality_index"],
            epsilon=float(z["epsilon"]),
            objective_mode=str(z["objective_mode"]),
            objective_value=z["objective_value"],
            exports=z["exports"],
            cmap=AffineConstraintMap(z["cmap_coeffs"], z["cmap_bound"]),
        )


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def update_manifest(directory, scenario: Scenario, **entries) -> dict:
    """Merge ``entries`` into the manifest, refusing to mix scenarios in one directory."""
    man = read_manifest(directory)
    fp = scenario.fingerprint()
    if man and man.get("fingerprint") != fp:
        raise ValueError(f"{directory} holds results of a different scenario ({man.get('fingerprint')})")
    man.update({
        "fingerprint": fp,
        "scenario": str(Path(scenario.source).resolve()) if scenario.source else None,
        "s_base_kva": scenario.s_base_kva,
    })
    for k, v in entries.items():
        if k == "mechanisms":
            man["mechanisms"] = sorted(set(man.get("mechanisms", [])) | set(v))
        else:
            man[k] = v
    atomic_write(Path(directory) / MANIFEST, json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


# ---------------------------------------------------------------------------
# long-format report tables


def report_tables(scenario: Scenario, results: dict) -> dict:
    """Long-format CSV text for price, limit-price, voltage and income plots."""
    base = scenario.s_base_kva
    hours = (np.arange(scenario.horizon)) * scenario.step_hours
    ids = [p.id for p in scenario.prosumers]
    prices, limits, volts, incomes = [], [], [], []
    for mech in sorted(results, key=lambda m: Mechanism(m).value):
        res = results[mech]
        name = Mechanism(mech).value
        alpha = scenario.price_to_cents_per_kwh(res.prices.alpha)
        for t in range(scenario.horizon):
            prices.append((name, t, float(hours[t]), "uniform", 0, float(alpha[t])))
        if res.prices.nodal is not None:
            nodal = scenario.price_to_cents_per_kwh(res.prices.nodal)
            for k in range(nodal.shape[0]):
                for t in range(scenario.horizon):
                    prices.append((name, t, float(hours[t]), "node", k + 1, float(nodal[k, t])))
        if res.prices.beta is not None:
            for k in range(res.prices.beta.shape[1]):
                for t in range(scenario.horizon):
                    limits.append((name, t, float(hours[t]), k, float(res.prices.beta[t, k])))
        v = nodal_voltages(scenario, res)
        for k in range(v.shape[0]):
            for t in range(scenario.horizon):
                volts.append((name, t, float(hours[t]), k + 1, float(v[k, t])))
        for i, pid in enumerate(ids):
            incomes.append((name, pid, "energy", float(res.energy_income[i])))
            incomes.append((name, pid, "limit", float(res.limit_income[i])))
    return {
        "prices_long.csv": _csv_text(base, ["mechanism", "t", "hour", "series", "node", "cents_per_kwh"], prices),
        "limit_prices_long.csv": _csv_text(base, ["mechanism", "t", "hour", "component", "beta"], limits),
        "voltages_long.csv": _csv_text(base, ["mechanism", "t", "hour", "node", "v_pu"], volts),
        "incomes_long.csv": _csv_text(base, ["mechanism", "prosumer_id", "component", "cents"], incomes),
    }
