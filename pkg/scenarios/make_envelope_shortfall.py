"""Regenerate the envelope-shortfall scenario.

Two prosumers on a three-node chain.  The exporter sits next to the root;
the importer sits at the far end with a heavy load and a small battery.
The feeder can carry the import, but the importer's share of the
low-voltage headroom cannot, so fixed envelopes leave no feasible plan
while trading unused headroom does.
"""

from pathlib import Path

import numpy as np

from gridmarket.feeder import Line
from gridmarket.scenario import ProsumerSpec, Scenario, emit_scenario

lines = (Line(0, 1, 0.1), Line(1, 2, 0.1), Line(2, 3, 0.1))
prosumers = (
    ProsumerSpec("exporter", 1, (20.0,), (8.0,), input_weight=0.1, state_weight=(0.002,),
                 terminal_weight=(0.4,)),
    ProsumerSpec("importer", 3, (5.0,), (3.0,), input_weight=0.1, state_weight=(0.002,),
                 terminal_weight=(0.4,)),
)
profiles = np.array([
    [18.0, 16.0, 14.0, 12.0],
    [-14.0, -15.0, -16.0, -14.0],
])
scenario = Scenario(
    name="envelope-shortfall",
    horizon=4,
    step_hours=1.0,
    s_base_kva=100.0,
    lines=lines,
    node_count=3,
    v0_pu=1.0,
    v_lower_pu=np.full(3, 0.95),
    v_upper_pu=np.full(3, 1.05),
    prosumers=prosumers,
    profiles_kw=profiles,
)

if __name__ == "__main__":
    emit_scenario(scenario, Path(__file__).parent / "envelope_shortfall")
