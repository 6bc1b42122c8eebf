"""Car following from first principles.

Walks through the acceleration law: free-road behavior, the interaction
term, the equilibrium gap, and a small platoon relaxing behind a slow
leader.  Run with `python demos/01_car_following.py`.
"""

import numpy as np

from hybridflow import DriverParams, equilibrium_gap, idm_acceleration

params = DriverParams()
print("driver parameters:", params, "\n")

# --- 1. free road: acceleration decays as speed approaches the target -----
print("free-road acceleration vs speed")
for v in np.linspace(0, params.v0, 8):
    a = idm_acceleration(v, float("inf"), 0.0, params)
    bar = "#" * int(40 * max(a, 0) / params.a_max)
    print(f"  v = {v:5.1f} m/s   a = {a:+.3f} m/s^2  {bar}")

# --- 2. closing in on a leader: the interaction term takes over -----------
print("\napproaching a leader 3 m/s slower, by gap")
for gap in (150, 100, 60, 40, 25, 15, 8):
    a = idm_acceleration(25.0, gap, 3.0, params)
    print(f"  gap = {gap:4d} m   a = {a:+8.3f} m/s^2")

# --- 3. the gap at which following is exactly comfortable ------------------
print("\nequilibrium gaps (zero acceleration while following)")
for v in (5, 10, 15, 20, 25, 30):
    gap = equilibrium_gap(float(v), params)
    check = idm_acceleration(float(v), gap, 0.0, params)
    print(f"  v = {v:2d} m/s   gap = {gap:7.2f} m   residual = {check:+.1e}")

# --- 4. a platoon relaxing behind a steady leader --------------------------
# integrate five followers with the same ballistic rule the engine uses
print("\nplatoon behind a leader pinned at 18 m/s (positions every 30 s)")
dt = 0.25
positions = np.array([500.0, 420.0, 340.0, 260.0, 180.0, 100.0])
speeds = np.array([18.0, 25.0, 25.0, 25.0, 25.0, 25.0])
length = 4.0
for step in range(int(240 / dt) + 1):
    if step % int(30 / dt) == 0:
        gaps = -(np.diff(positions) + length)
        print(f"  t = {step * dt:5.0f} s   gaps:",
              "  ".join(f"{g:6.2f}" for g in gaps))
    accel = np.zeros_like(speeds)
    for i in range(1, len(positions)):
        gap = positions[i - 1] - length - positions[i]
        accel[i] = idm_acceleration(speeds[i], gap, speeds[i] - speeds[i - 1], params)
    speeds = np.maximum(speeds + accel * dt, 0.0)
    positions += speeds * dt + 0.5 * np.maximum(accel, -speeds / dt) * dt * dt

print(f"\n  target gap at 18 m/s: {equilibrium_gap(18.0, params):.2f} m")
