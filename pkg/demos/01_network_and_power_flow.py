"""
IEEE 14-bus case: parse, solve, initialize
==========================================

Loads the bundled network, runs Newton-Raphson and builds the classical
machine model used by the simulator.
"""

import numpy as np

from ptsvm import load_ieee14
from ptsvm.powerflow import init_machines, solve_power_flow

net = load_ieee14()
print(len(net.buses), "buses,", len(net.branches), "branches,", len(net.fault_lines), "fault lines")

# flat start, converges in a handful of iterations
sol = solve_power_flow(net)
print("iterations:", sol.iterations)
for it, mis in enumerate(sol.mismatch_history):
    print(f"  {it}: {mis:.3e}")

# the archived solution is stored in the CDF itself
v_ref = np.array([b.v_final for b in net.buses])
a_ref = np.array([b.angle_final for b in net.buses])
print("max |V - archive|:", np.abs(sol.vm - v_ref).max())
print("max |angle - archive| (deg):", np.abs(np.degrees(sol.va) - a_ref).max())

init = init_machines(net, sol)
for bus, e, d, pm in zip(init.bus, init.E_mag, init.delta0, init.P_m):
    print(f"machine at bus {bus}: E' = {e:.4f}  delta0 = {np.degrees(d):7.3f} deg  Pm = {pm:.4f}")
