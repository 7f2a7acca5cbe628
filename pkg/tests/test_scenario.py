import time

import numpy as np
import pytest

from gridmarket.scenario import (
    ParseError,
    SyntheticShape,
    ValidationError,
    emit_scenario,
    generate_synthetic,
    load_scenario,
)

FEEDER = "from,to,r_pu,x_pu\n0,1,0.01,0.02\n1,2,0.01,0.02\n"
PROSUMERS = '[[prosumer]]\nid = "a"\nnode = 1\ncapacity_kwh = [10.0]\nx0_kwh = [4.0]\n'
PROFILES = "prosumer_id,t,net_supply_kw\na,0,1.5\na,1,-2.0\n"


def minimal(tmp_path, scenario_extra="", feeder=True, horizon=2):
    if feeder:
        (tmp_path / "feeder.csv").write_text(FEEDER)
    (tmp_path / "prosumers.toml").write_text(PROSUMERS)
    (tmp_path / "profiles.csv").write_text(PROFILES)
    text = (
        f"[scenario]\nhorizon = {horizon}\n{scenario_extra}\n"
        '[feeder]\ntopology = "feeder.csv"\n\n'
        '[fleet]\nparams = "prosumers.toml"\nprofiles = "profiles.csv"\n'
    )
    path = tmp_path / "scenario.toml"
    path.write_text(text)
    return path


def test_minimal_config_defaults(tmp_path):
    s = load_scenario(minimal(tmp_path))
    assert s.horizon == 2 and s.step_hours == 0.5 and s.s_base_kva == 100.0
    fd = s.feeder()
    assert fd.v_lower == pytest.approx(np.full(2, 0.95**2))
    assert fd.v_upper == pytest.approx(np.full(2, 1.05**2))
    assert s.epsilon == 1e-4 and s.objective_mode == "sqnorm"
    pr = s.fleet()[0]
    assert pr.net_supply == pytest.approx([0.015, -0.02])
    assert pr.x_lower == pytest.approx([0.2 * 0.1]) and pr.x_upper == pytest.approx([0.85 * 0.1])
    assert pr.u_upper == pytest.approx([0.066])


def test_missing_topology(tmp_path):
    with pytest.raises(ValidationError) as info:
        load_scenario(minimal(tmp_path, feeder=False))
    assert info.value.field == "feeder.topology"


def test_zero_horizon(tmp_path):
    with pytest.raises(ValidationError) as info:
        load_scenario(minimal(tmp_path, horizon=0))
    assert info.value.field == "scenario.horizon"


def test_parse_error_location(tmp_path):
    path = minimal(tmp_path)
    path.write_text("[scenario]\nhorizon = 2\nname = \n")
    with pytest.raises(ParseError) as info:
        load_scenario(path)
    assert info.value.line == 3 and info.value.column is not None


def test_unknown_mechanism(tmp_path):
    path = minimal(tmp_path)
    path.write_text(path.read_text() + '\n[market]\nmechanisms = ["auction"]\n')
    with pytest.raises(ValidationError):
        load_scenario(path)


def test_round_trip_is_idempotent(tmp_path):
    s = generate_synthetic(3, 6, 12, feeder="random", node_count=5)
    first = emit_scenario(s, tmp_path / "a")
    again = emit_scenario(load_scenario(first), tmp_path / "b")
    for name in ("scenario.toml", "feeder.csv", "prosumers.toml", "profiles.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert load_scenario(again).fingerprint() == s.fingerprint()


def test_generator_is_deterministic(tmp_path):
    emit_scenario(generate_synthetic(9, 20, 48), tmp_path / "a")
    emit_scenario(generate_synthetic(9, 20, 48), tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert generate_synthetic(10, 20, 48).fingerprint() != generate_synthetic(9, 20, 48).fingerprint()


def test_full_scale_generation_is_fast():
    t0 = time.perf_counter()
    s = generate_synthetic(0, 300, 48)
    s.feeder()
    s.fleet()
    assert time.perf_counter() - t0 < 1.0
    assert s.N == 300 and s.horizon == 48 and s.step_hours == 0.5


def test_generated_ranges():
    s = generate_synthetic(1, 300, 48)
    caps = np.array([p.capacity_kwh for p in s.prosumers])
    x0 = np.array([p.x0_kwh for p in s.prosumers])
    assert caps.min() >= 0 and caps.max() <= 75
    assert np.all(x0 >= 0.2 * caps - 1e-12) and np.all(x0 <= 0.5 * caps + 1e-12)
    assert all(p.rate_kw == 6.6 and tuple(p.soc_bounds) == (0.2, 0.85) for p in s.prosumers)
    # midday surplus, evening deficit
    hours = (np.arange(48) + 0.5) * 0.5
    mean = s.profiles_kw.mean(axis=0)
    assert mean[(hours > 11) & (hours < 14)].min() > 0
    assert mean[(hours > 18) & (hours < 21)].max() < 0


def test_zero_shape_gives_flat_supply():
    shape = SyntheticShape(pv_peak_kw=0.0, base_load_kw=0.0, evening_load_kw=0.0)
    s = generate_synthetic(2, 10, 48, shape)
    assert shape.zero_supply()
    assert np.all(s.profiles_kw == 0.0)


def test_unit_conversion():
    s = generate_synthetic(2, 3, 48)
    assert s.price_to_cents_per_kwh(np.array([50.0])) == pytest.approx([1.0])
    assert s.power_to_kw(0.066) == pytest.approx(6.6)
