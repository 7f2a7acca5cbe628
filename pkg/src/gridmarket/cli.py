"""Command-line interface.

Exit codes: 0 success, 1 infeasible market or failed verification,
2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .envelope import allocate
from .feeder import voltage_constraint_map
from .market import MarketInfeasible, Mechanism, clear
from .results import (
    load_allocation,
    load_result,
    read_manifest,
    report_tables,
    save_allocation,
    save_result,
    update_manifest,
)
from .scenario import (
    MECHANISMS,
    ParseError,
    SyntheticShape,
    ValidationError,
    atomic_write,
    emit_scenario,
    generate_synthetic,
    load_scenario,
)
from .solver import SolverError
from .verify import verify_all

log = logging.getLogger("gridmarket")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridmarket", description="Feeder-aware energy market clearing.")
    ap.add_argument("--json", action="store_true", help="machine-readable output and errors")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic scenario")
    g.add_argument("-o", "--out", required=True, help="directory for the scenario files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-n", "--prosumers", type=int, default=12)
    g.add_argument("-T", "--horizon", type=int, default=48)
    g.add_argument("--feeder", choices=["ieee13", "random"], default="ieee13")
    g.add_argument("--nodes", type=int, default=12, help="node count of a random feeder")
    g.add_argument("--impedance-scale", type=float, default=1.0)
    g.add_argument("--amplitude", type=float, default=1.0, help="net-supply multiplier")
    g.add_argument("--epsilon", type=float, default=1e4, help="envelope fairness weight")

    d = sub.add_parser("doe", help="compute operating envelopes")
    d.add_argument("-s", "--scenario", required=True)
    d.add_argument("-o", "--out", required=True)
    d.add_argument("--epsilon", type=float)
    d.add_argument("--mode", choices=["sqnorm", "norm"])

    c = sub.add_parser("clear", help="clear one market and write its result bundle")
    c.add_argument("-m", "--mechanism", required=True, choices=MECHANISMS)
    c.add_argument("-s", "--scenario", required=True)
    c.add_argument("-o", "--out", required=True)

    v = sub.add_parser("verify", help="run the property checks on saved results")
    v.add_argument("out")
    v.add_argument("-s", "--scenario", help="scenario file (defaults to the one in the manifest)")

    r = sub.add_parser("report", help="write long-format plot tables")
    r.add_argument("out")
    r.add_argument("-s", "--scenario")
    return ap


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def _scenario_for(args, out):
    path = getattr(args, "scenario", None)
    if path is None:
        man = read_manifest(out)
        if not man.get("scenario"):
            raise UsageError(f"{out} has no manifest naming a scenario; pass --scenario")
        path = man["scenario"]
    return load_scenario(path)


def _check_target(out, scenario) -> None:
    """Refuse to write into a directory holding another scenario's results."""
    fp = read_manifest(out).get("fingerprint")
    if fp and fp != scenario.fingerprint():
        raise UsageError(f"{out} holds results of a different scenario ({fp})")


def _allocation(args, scenario, out, recompute=False):
    alloc = None if recompute else load_allocation(out)
    if alloc is not None and alloc.w.shape[:2] == (scenario.horizon, scenario.N):
        return alloc
    feeder, fleet = scenario.feeder(), scenario.fleet()
    cmap = voltage_constraint_map(feeder).for_agents(fleet.nodes - 1)
    eps = getattr(args, "epsilon", None) or scenario.epsilon
    mode = getattr(args, "mode", None) or scenario.objective_mode
    alloc = allocate(cmap, objective_mode=mode, epsilon=eps, horizon=scenario.horizon)
    save_allocation(out, scenario, alloc)
    update_manifest(out, scenario, envelopes="envelopes.csv")
    return alloc


def cmd_gen(args) -> int:
    shape = SyntheticShape(amplitude=args.amplitude)
    s = generate_synthetic(
        args.seed, args.prosumers, args.horizon, shape,
        feeder=args.feeder, node_count=args.nodes, impedance_scale=args.impedance_scale,
        epsilon=args.epsilon,
    )
    path = emit_scenario(s, args.out)
    _emit(args, {"scenario": str(path), "fingerprint": s.fingerprint()}, f"wrote {path}")
    return EXIT_OK


def cmd_doe(args) -> int:
    s = load_scenario(args.scenario)
    _check_target(args.out, s)
    alloc = _allocation(args, s, args.out, recompute=True)
    dev = float(np.abs(alloc.w.sum(axis=1) - alloc.cmap.bound).max()) if alloc.cmap.bound.ndim == 1 else 0.0
    _emit(args, {"envelopes": str(Path(args.out) / "envelopes.csv"), "decomposition_residual": dev},
          f"wrote {Path(args.out) / 'envelopes.csv'} (decomposition residual {dev:.2e})")
    return EXIT_OK


def cmd_clear(args) -> int:
    s = load_scenario(args.scenario)
    _check_target(args.out, s)
    mech = Mechanism(args.mechanism)
    alloc = None if mech is Mechanism.LOCATIONAL else _allocation(args, s, args.out)
    res = clear(mech, s.feeder(), s.fleet(), alloc, tol=s.tolerances["solve"])
    save_result(args.out, s, res)
    update_manifest(args.out, s, mechanisms=[mech.value])
    total = res.budget_total
    payload = {
        "mechanism": mech.value,
        "welfare_cents": res.welfare,
        "budget_cents": total,
        "iterations": res.iterations,
        "kkt_max": res.kkt.max(),
    }
    _emit(args, payload, f"{mech.value}: welfare {res.welfare:.6g} cents, budget {total:.3e} cents, "
                         f"{res.iterations} iterations")
    return EXIT_OK


def cmd_verify(args) -> int:
    s = _scenario_for(args, args.out)
    man = read_manifest(args.out)
    mechs = man.get("mechanisms", [])
    if not mechs:
        raise UsageError(f"{args.out} holds no clearing results")
    if man.get("fingerprint") and man["fingerprint"] != s.fingerprint():
        raise UsageError("scenario does not match the saved results")
    results = {m: load_result(args.out, m) for m in mechs}
    alloc = load_allocation(args.out)
    report = verify_all(
        s.feeder(), s.fleet(), results, alloc,
        price_scale=1.0 / (s.s_base_kva * s.step_hours),
        fingerprint=s.fingerprint(),
        tol=s.tolerances["verify"],
    )
    atomic_write(Path(args.out) / "verification.jsonl", report.json_lines())
    atomic_write(Path(args.out) / "verification.txt", report.table())
    if args.json:
        sys.stdout.write(report.json_lines())
    else:
        sys.stdout.write(report.table())
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_report(args) -> int:
    s = _scenario_for(args, args.out)
    mechs = read_manifest(args.out).get("mechanisms", [])
    if not mechs:
        raise UsageError(f"{args.out} holds no clearing results")
    results = {m: load_result(args.out, m) for m in mechs}
    d = Path(args.out) / "report"
    names = []
    for name, text in report_tables(s, results).items():
        atomic_write(d / name, text)
        names.append(str(d / name))
    _emit(args, {"files": names}, "\n".join(f"wrote {n}" for n in names))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "doe": cmd_doe, "clear": cmd_clear, "verify": cmd_verify, "report": cmd_report}


def _fail(args, code, kind, message, **extra) -> int:
    if getattr(args, "json", False):
        sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    else:
        sys.stderr.write(f"error: {message}\n")
        if extra.get("explanation"):
            sys.stderr.write(extra["explanation"] + "\n")
        if extra.get("prosumers"):
            sys.stderr.write(f"prosumers involved: {', '.join(map(str, extra['prosumers']))}\n")
    return code


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except MarketInfeasible as exc:
        ids = list(exc.prosumers)
        try:
            s = load_scenario(args.scenario)
            ids = [s.prosumers[i].id for i in exc.prosumers]
        except (AttributeError, ValueError, IndexError):
            pass
        return _fail(args, EXIT_FAIL, "infeasible", str(exc), prosumers=ids, explanation=exc.explanation)
    except SolverError as exc:
        return _fail(args, EXIT_FAIL, "solver", str(exc))
    except (ValidationError, ParseError, UsageError, FileNotFoundError) as exc:
        return _fail(args, EXIT_USAGE, "usage", str(exc))
    except ValueError as exc:
        return _fail(args, EXIT_USAGE, "input", str(exc))


if __name__ == "__main__":
    sys.exit(main())
