"""
Critical clearing time on the 14-bus case
=========================================

Bisects the fault clearing time for a three-phase fault in the middle of
each of the first few fault-eligible lines.
"""

from ptsvm import load_ieee14
from ptsvm.dynamics import SimulationConfig
from ptsvm.scenario import Scenario, evaluate_scenario, load_buses

net = load_ieee14()
loads = (1.0,) * len(load_buses(net))
cfg = SimulationConfig()


def unstable(line, fct):
    return evaluate_scenario(net, Scenario(line, "LLL", 0.5, fct, loads), cfg).label == 1


for rank, line in enumerate(net.fault_lines[:4], start=1):
    lo, hi = 0.01, 2.0
    if not unstable(line, hi):
        print(f"line {rank}: stable even at {hi} s")
        continue
    while hi - lo > 0.005:
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if unstable(line, mid) else (mid, hi)
    b = net.branches[line]
    print(f"line {rank} ({b.from_bus}-{b.to_bus}): CCT ~ {0.5 * (lo + hi):.3f} s")

# one trajectory summary either side of the boundary
for fct in (0.02, 1.4):
    out = evaluate_scenario(net, Scenario(net.fault_lines[0], "LLL", 0.5, fct, loads), cfg)
    print(f"fct {fct}: delta_max {out.delta_max:.1f} deg, TSI {out.tsi:.3f}, label {out.label}")
