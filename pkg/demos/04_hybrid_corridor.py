"""A corridor simulated with mixed representations.

The middle third of a 2 km road runs as cell densities while both ends run
vehicle by vehicle.  Vehicles crossing into the middle dissolve into
density; banked outflow at the far boundary condenses back into vehicles.
The conservation ledger stays exact throughout.
"""

from pathlib import Path

from hybridflow import EngineConfig, build_state, parse_scenario
from hybridflow.engine import advance_step
from hybridflow.hybrid import MICRO

FIXTURE = Path(__file__).parent.parent / "tests" / "fixtures" / "hybrid"

model = parse_scenario(FIXTURE)
config = EngineConfig(seed=42)
state = build_state(model, config)

print("cluster layout:")
for cluster in state.chain_clusters("chain0"):
    print(f"  {cluster.id}: [{cluster.start:6.0f}, {cluster.end:6.0f}) m  "
          f"{cluster.representation}")
print()

header = f"{'t[s]':>6} {'entry':>14} {'middle':>20} {'exit':>14} {'ledger residual':>16}"
print(header)
for step in range(1, 2401):
    advance_step(state, config)
    if step % 240 == 0:
        cells = []
        for cluster in state.chain_clusters("chain0"):
            if cluster.representation == MICRO:
                speeds = [v.speed for v in cluster.vehicles.values()]
                mean = sum(speeds) / len(speeds) if speeds else state.fd.v_f
                cells.append(f"{len(cluster.vehicles):3d} veh @ {mean:4.1f} m/s")
            else:
                cells.append(f"{cluster.mass():6.2f} veh-mass @ "
                             f"{cluster.segment.mean_speed():4.1f} m/s")
        print(f"{state.time:6.0f} {cells[0]:>14} {cells[1]:>20} {cells[2]:>14} "
              f"{state.ledger_residual():16.2e}")

led = state.ledger
print(f"\nafter {state.step} steps: inserted {led.inserted}, absorbed "
      f"{led.absorbed}, in flight {state.total_mass():.3f} vehicle-masses")
print("every crossing between representations preserved mass to machine noise")
