import json
from pathlib import Path

import pytest

from gridmarket.cli import main
from gridmarket.results import RESULT_TABLES, read_manifest, read_table

SHORTFALL = Path(__file__).resolve().parents[1] / "scenarios" / "envelope_shortfall" / "scenario.toml"


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    scen = d / "scen"
    out = d / "out"
    assert main(["gen", "-o", str(scen), "--seed", "2", "-n", "4", "-T", "8", "--impedance-scale", "3000"]) == 0
    for mech in ("locational", "uniform-limit"):
        assert main(["clear", "-m", mech, "-s", str(scen / "scenario.toml"), "-o", str(out)]) == 0
    return scen, out


def test_clear_writes_bundle(bundle):
    scen, out = bundle
    man = read_manifest(out)
    assert man["mechanisms"] == ["locational", "uniform-limit"]
    assert man["envelopes"] == "envelopes.csv"
    N, T, nodes = 4, 8, 12
    counts = {"T": T, "T*M": T * 2 * nodes, "T*nodes": T * nodes, "N*T": N * T, "N": N}
    for mech in man["mechanisms"]:
        for name, (header, rows) in RESULT_TABLES.items():
            base, table = read_table(out / mech / name)
            assert base == 100.0
            assert (list(table[0]) if table else header) == header
            expected = 0 if (name == "prices_limits.csv" and mech == "locational") else counts[rows]
            assert len(table) == expected, (mech, name)
    _, budget = read_table(out / "uniform-limit" / "budget.csv")
    assert max(abs(float(r["budget_cents"])) for r in budget) <= 1e-6


def test_verify_and_report(bundle, capsys):
    _, out = bundle
    assert main(["--json", "verify", str(out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    rows = [json.loads(x) for x in lines[1:]]
    names = {r["check"] for r in rows}
    assert {"welfare_equivalence", "uniform_price_identity", "budget_weak", "budget_limits",
            "surplus_redistribution"} <= names
    assert all(r["pass"] for r in rows)
    assert (out / "verification.txt").exists() and (out / "verification.jsonl").exists()
    assert main(["report", str(out)]) == 0
    base, prices = read_table(out / "report" / "prices_long.csv")
    assert {r["mechanism"] for r in prices} == {"locational", "uniform-limit"}


def test_doe_command(tmp_path, capsys):
    assert main(["--json", "doe", "-s", str(SHORTFALL), "-o", str(tmp_path)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["decomposition_residual"] <= 1e-6
    assert (tmp_path / "envelopes.csv").read_text().startswith("# s_base_kva=100.0\n")


def test_envelope_shortfall_exit_code(tmp_path, capsys):
    code = main(["clear", "-m", "uniform-doe", "-s", str(SHORTFALL), "-o", str(tmp_path)])
    err = capsys.readouterr().err
    assert code == 1
    assert "infeasible" in err and "envelope" in err
    assert "importer" in err and "exporter" in err
    assert main(["clear", "-m", "uniform-limit", "-s", str(SHORTFALL), "-o", str(tmp_path)]) == 0


def test_json_errors(tmp_path, capsys):
    code = main(["--json", "clear", "-m", "uniform-doe", "-s", str(SHORTFALL), "-o", str(tmp_path)])
    err = json.loads(capsys.readouterr().err)
    assert code == 1 and err["error"] == "infeasible" and err["prosumers"]


def test_usage_errors(tmp_path, capsys):
    assert main(["clear", "-m", "auction", "-s", str(SHORTFALL), "-o", str(tmp_path)]) == 2
    assert main(["clear", "-m", "locational", "-s", str(tmp_path / "nope.toml"), "-o", str(tmp_path)]) == 2
    assert main(["verify", str(tmp_path / "empty")]) == 2
    assert main([]) == 2


def test_mixing_scenarios_is_refused(bundle, capsys):
    _, out = bundle
    before = (out / "locational" / "result.npz").read_bytes()
    assert main(["clear", "-m", "locational", "-s", str(SHORTFALL), "-o", str(out)]) == 2
    assert "different scenario" in capsys.readouterr().err
    assert (out / "locational" / "result.npz").read_bytes() == before
