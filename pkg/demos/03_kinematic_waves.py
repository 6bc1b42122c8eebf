"""Kinematic waves on cells: a shock front moving upstream.

Starts a road with light traffic running into a congested stretch and
prints the density profile as the interface (a shock) travels backward at
the flux-jump speed.
"""

import numpy as np

from hybridflow import FundamentalDiagram, MacroSegment, ctm_step, fd_flow

fd = FundamentalDiagram()
print(f"triangular flow-density relation: v_f={fd.v_f}, w={fd.w:.3f}, "
      f"rho_c={fd.rho_c}, rho_jam={fd.rho_jam}\n")

dx, dt = 50.0, 0.25
n = 60   # 3 km
rho = np.where(np.arange(n) * dx < 1500.0, 0.01, 0.12)
seg = MacroSegment(dx=[dx] * n, lanes=[1] * n, rho=rho, fd=fd)

q_in = fd_flow(0.01, fd)
q_out = fd_flow(0.12, fd)
expected = (q_out - q_in) / (0.12 - 0.01)
print(f"upstream flow {q_in:.3f} veh/s, downstream flow {q_out:.3f} veh/s")
print(f"flux-jump front speed: {expected:+.3f} m/s\n")

GLYPHS = " .:-=+*#%@"

def profile_line(seg):
    out = []
    for r in seg.rho:
        idx = min(int(r / fd.rho_jam * (len(GLYPHS) - 1) + 0.5), len(GLYPHS) - 1)
        out.append(GLYPHS[idx])
    return "".join(out)

print("density map (one row per 20 s, left = upstream)")
for step in range(int(200.0 / dt) + 1):
    if step % int(20.0 / dt) == 0:
        print(f"  t={step * dt:5.0f}s |{profile_line(seg)}|")
    ctm_step(seg, q_in, q_out, dt)

mid = (0.01 + 0.12) / 2
front = np.flatnonzero(seg.rho > mid)[0] * dx
print(f"\nfront now near x = {front:.0f} m "
      f"(started at 1500 m; {200.0 * expected:+.0f} m expected drift)")
print(f"total mass: {seg.total_mass():.3f} vehicles")
