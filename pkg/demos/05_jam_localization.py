"""Locating a jam by refining the representation where it hurts.

A 2 km corridor runs fully as cell densities.  A capacity restriction
throttles one stretch for the first 200 s.  Watch the controller flag the
slow cells after the persistence window, carve the region out with splits,
refine it to vehicles, and - once the restriction lifts and speeds
recover - coarsen it back and merge the corridor together again.
"""

from pathlib import Path

from hybridflow import EngineConfig, build_state, parse_scenario
from hybridflow.engine import advance_step

FIXTURE = Path(__file__).parent.parent / "tests" / "fixtures" / "jam"

model = parse_scenario(FIXTURE)
print(f"policy: flag below {model.lod.theta_down} of free speed for "
      f"{model.lod.persistence} consecutive steps; recover above "
      f"{model.lod.theta_up}; cooldown {model.lod.cooldown} steps\n")
restriction = model.restrictions[0]
print(f"restriction: road {restriction.road} [{restriction.start:.0f}, "
      f"{restriction.end:.0f}) m at {restriction.factor:.0%} capacity until "
      f"t={restriction.to_t:.0f} s\n")

config = EngineConfig(seed=3)
state = build_state(model, config)

seen = 0
for _ in range(1600):
    advance_step(state, config)
    while seen < len(state.transitions):
        t = state.transitions[seen]
        seen += 1
        print(f"  step {t.step:4d} (t={t.step * state.dt:5.0f}s)  {t.kind:8s} "
              f"at {t.position:6.0f} m  trigger={t.trigger:8s} "
              f"mass {t.pre_mass:.3f} -> {t.post_mass:.3f}")

print("\nfinal layout:")
for cluster in state.chain_clusters("chain0"):
    print(f"  {cluster.id}: [{cluster.start:6.0f}, {cluster.end:6.0f}) m  "
          f"{cluster.representation}  mass {cluster.mass():.2f}")
print(f"\nledger residual after {state.step} steps: {state.ledger_residual():.2e}")
