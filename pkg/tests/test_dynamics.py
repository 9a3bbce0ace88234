import dataclasses
import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from nets import INF_H, INF_XD, smib, symmetric_pair, two_machine
from ptsvm.dynamics import (FAULT_TYPES, IslandingError, SimulationConfig, compute_tsi,
                            effective_fault_admittance, label, reduced_networks, simulate)
from ptsvm.powerflow import init_machines, solve_power_flow
from ptsvm.scenario import Scenario

WS = 2 * math.pi * 60


def _setup(net):
    return net, init_machines(net, solve_power_flow(net, tol=1e-12))


@pytest.mark.parametrize("dmax,tsi", [(0.0, 1.0), (360.0, 0.0), (500.0, -0.16279069767441862)])
def test_tsi_examples(dmax, tsi):
    assert compute_tsi(dmax) == pytest.approx(tsi, abs=1e-15)


def test_tsi_rejects_negative():
    with pytest.raises(ValueError):
        compute_tsi(-1.0)


@pytest.mark.parametrize("tsi,lab", [(0.5, 0), (-0.1, 1), (0.0, 0)])
def test_label_examples(tsi, lab):
    assert label(tsi) == lab


def test_fault_admittance_examples():
    assert effective_fault_admittance("LLL", 0.2j).y_f == complex(1e6, 0)
    assert effective_fault_admittance("LG", 0.2j).y_f == pytest.approx(-1.25j)
    z = 0.03 + 0.17j
    mags = [abs(effective_fault_admittance(f, z).y_f) for f in ("LLL", "LLG", "LL", "LG")]
    assert mags == sorted(mags, reverse=True) and len(set(mags)) == 4
    assert effective_fault_admittance("LLG", z).y_f == pytest.approx(1 / (0.75 * z))
    assert effective_fault_admittance("LL", z).y_f.real >= 0
    with pytest.raises(ValueError):
        effective_fault_admittance("LLLG", z)
    with pytest.raises(ValueError):
        effective_fault_admittance("LG", 0j)


def test_no_fault_is_equilibrium(ieee14):
    net, init = _setup(ieee14)
    out = simulate(net, init, None, SimulationConfig(t_end=3.0), record=True)
    sep0 = math.degrees(init.delta0.max() - init.delta0.min())
    assert out.delta_max == pytest.approx(sep0, abs=1e-6)
    assert np.abs(out.trajectory.omega).max() < 1e-6
    assert out.label == 0 and not out.early_exit
    zero = Scenario(0, "LLL", 0.5, 0.0, ())
    assert simulate(net, init, zero, SimulationConfig(t_end=3.0)).delta_max == out.delta_max


# --- single machine against an infinite bus ---------------------------------------------

P, XL, XD, H = 0.8, 0.5, 0.3, 3.0


def _smib_oracle(lam):
    """Critical clearing time for a bolted fault at ``lam`` on one of the two lines."""
    theta = math.asin(P * XL / 2)
    V1 = complex(math.cos(theta), math.sin(theta))
    I = np.conj(complex(P, (1 - math.cos(theta)) / (XL / 2)) / V1)
    E1 = V1 + 1j * XD * I
    E2 = 1.0 - 1j * INF_XD * I
    EE = abs(E1) * abs(E2)
    d0 = np.angle(E1) - np.angle(E2)
    # fault-on transfer susceptance from nodal analysis of the two inner nodes
    bd, bl, bi = 1 / XD, 1 / XL, 1 / INF_XD
    b1, b2 = 1 / (lam * XL), 1 / ((1 - lam) * XL)
    a, c = bd + bl + b1, bl + b2 + bi
    r1 = EE * bd * bl * bi / (a * c - bl * bl)
    r2 = EE / (XD + XL + INF_XD)
    dm = math.pi - math.asin(P / r2)
    dcr = math.acos((P * (dm - d0) + r2 * math.cos(dm) - r1 * math.cos(d0)) / (r2 - r1))
    # relative motion of the two rotors
    k = WS / (2 * H) + WS / (2 * INF_H)
    hit = lambda t, s: s[0] - dcr  # noqa: E731
    hit.terminal = True
    sol = solve_ivp(lambda t, s: (s[1], k * (P - r1 * math.sin(s[0]))), (0, 5), (d0, 0.0),
                    events=hit, rtol=1e-12, atol=1e-12)
    return float(sol.t_events[0][0])


def _smib_label(net, init, lam, fct, cfg):
    return simulate(net, init, Scenario(0, "LLL", lam, fct, ()), cfg).label


CFG_SMIB = SimulationConfig(t_end=3.0, t_fault=0.5, dt=0.001)


@pytest.mark.parametrize("lam", [0.0, 0.3, 0.8])
def test_smib_critical_clearing_time(lam):
    net, init = _setup(smib(P, XL, XD, H))
    t_cr = _smib_oracle(max(lam, 0.01))
    lo, hi = 0.01, 1.0
    assert _smib_label(net, init, lam, lo, CFG_SMIB) == 0
    assert _smib_label(net, init, lam, hi, CFG_SMIB) == 1
    while hi - lo > 1e-3:
        mid = 0.5 * (lo + hi)
        if _smib_label(net, init, lam, mid, CFG_SMIB):
            hi = mid
        else:
            lo = mid
    assert abs(0.5 * (lo + hi) - t_cr) < 5e-3
    assert _smib_label(net, init, lam, t_cr - 0.01, CFG_SMIB) == 0
    assert _smib_label(net, init, lam, t_cr + 0.01, CFG_SMIB) == 1


def test_monotone_severity_on_smib():
    net, init = _setup(smib(P, XL, XD, H))
    cfg = SimulationConfig(t_end=3.0, t_fault=0.5)
    for fct in (0.05, 0.15, 0.25):
        d = [simulate(net, init, Scenario(0, f, 0.4, fct, ()), cfg).delta_max
             for f in ("LLL", "LLG", "LL", "LG")]
        assert d[0] >= d[1] >= d[2] >= d[3]


def test_monotone_in_clearing_time():
    net, init = _setup(smib(P, XL, XD, H))
    cfg = SimulationConfig(t_end=3.0, t_fault=0.5)
    d = [simulate(net, init, Scenario(0, "LLG", 0.4, fct, ()), cfg).delta_max
         for fct in (0.02, 0.06, 0.1, 0.14)]
    assert d == sorted(d)


def _end_state(net, init, sc, dt):
    cfg = SimulationConfig(t_end=2.0, t_fault=0.5, dt=dt)
    tr = simulate(net, init, sc, cfg, record=True).trajectory
    return tr.delta[-1] - tr.delta[-1][-1]


def test_rk4_fourth_order():
    net, init = _setup(smib(P, XL, XD, H))
    sc = Scenario(0, "LL", 0.5, 0.1, ())
    ref = _end_state(net, init, sc, 0.01 / 16)
    e1 = np.abs(_end_state(net, init, sc, 0.02) - ref).max()
    e2 = np.abs(_end_state(net, init, sc, 0.01) - ref).max()
    assert 12 <= e1 / e2 <= 20


def test_switch_time_off_grid_is_hit_exactly():
    net, init = _setup(smib(P, XL, XD, H))
    cfg = SimulationConfig(t_end=1.0, t_fault=0.1234, dt=0.01)
    tr = simulate(net, init, Scenario(0, "LLL", 0.5, 0.0567, ()), cfg, record=True).trajectory
    assert np.any(np.isclose(tr.t, 0.1234, atol=1e-15, rtol=0))
    assert np.any(np.isclose(tr.t, 0.1234 + 0.0567, atol=1e-15, rtol=0))
    assert np.all(np.diff(tr.t) > 0)


def _energy(Y, E, Pm, M, delta, omega):
    B = Y.imag
    ke = 0.5 * np.sum(M * omega ** 2, axis=1)
    pe = -delta @ Pm
    m = E.size
    for i in range(m):
        for j in range(i + 1, m):
            pe -= E[i] * E[j] * B[i, j] * np.cos(delta[:, i] - delta[:, j])
    return ke, ke + pe


@pytest.mark.parametrize("ftype", ["LG", "LL"])
def test_energy_conserved_between_switches(ftype):
    net, init = _setup(two_machine())
    sc = Scenario(1, ftype, 0.4, 0.3, ())
    cfg = SimulationConfig(t_end=3.0, t_fault=0.5, dt=0.005)
    red = reduced_networks(net, init, sc)
    assert np.abs(red.fault.real).max() < 1e-12
    tr = simulate(net, init, sc, cfg, record=True).trajectory
    M = 2 * net.machine_params()["H"] / WS
    segments = [(red.pre, tr.t <= 0.5), (red.fault, (tr.t >= 0.5) & (tr.t <= 0.8)),
                (red.post, tr.t >= 0.8)]
    ke_all, _ = _energy(red.post, init.E_mag, init.P_m, M, tr.delta, tr.omega)
    peak = ke_all.max()
    assert peak > 0
    for Y, mask in segments[1:]:
        _, tot = _energy(Y, init.E_mag, init.P_m, M, tr.delta[mask], tr.omega[mask])
        assert np.ptp(tot) < 1e-3 * peak


def test_symmetric_pair_keeps_relative_angle():
    net, init = _setup(symmetric_pair())
    assert init.delta0[0] == pytest.approx(init.delta0[1], abs=1e-12)
    sc = Scenario(2, "LLG", 0.5, 0.15, ())
    tr = simulate(net, init, sc, SimulationConfig(t_end=3.0), record=True).trajectory
    rel = tr.delta[:, 0] - tr.delta[:, 1]
    assert np.ptp(rel) < 1e-9
    assert np.abs(tr.omega).max() > 1e-3


def test_rotation_invariance():
    net, init = _setup(smib(P, XL, XD, H))
    sc = Scenario(0, "LLG", 0.4, 0.12, ())
    cfg = SimulationConfig(t_end=2.0, t_fault=0.5)
    base = simulate(net, init, sc, cfg)
    shifted = dataclasses.replace(init, delta0=init.delta0 + 0.7)
    assert simulate(net, shifted, sc, cfg).delta_max == pytest.approx(base.delta_max, abs=1e-9)


def test_determinism(ieee14):
    net, init = _setup(ieee14)
    sc = Scenario(ieee14.fault_lines[4], "LLG", 0.37, 0.85, (1.0,) * 11)
    a = simulate(net, init, sc, record=True)
    b = simulate(net, init, sc, record=True)
    assert a == b
    assert np.array_equal(a.trajectory.delta, b.trajectory.delta)


def test_early_exit_on_angle_ceiling():
    net, init = _setup(smib(P, XL, XD, H))
    sc = Scenario(0, "LLL", 0.3, 1.5, ())
    out = simulate(net, init, sc, SimulationConfig(t_end=10.0, t_fault=0.5))
    assert out.early_exit and out.label == 1 and out.t_stop < 10.0
    assert out.delta_max > 2000.0


def test_uncleared_fault_judged_on_fault_on_phase():
    net, init = _setup(smib(P, XL, XD, H))
    sc = Scenario(0, "LG", 0.5, 20.0, ())
    out = simulate(net, init, sc, SimulationConfig(t_end=3.0, t_fault=0.5))
    assert out.t_stop == pytest.approx(3.0)


def test_islanding_trip_raises():
    net, init = _setup(two_machine())
    with pytest.raises(IslandingError):
        reduced_networks(net, init, Scenario(0, "LLL", 0.5, 0.1, ()))


def test_trajectory_csv():
    net, init = _setup(smib(P, XL, XD, H))
    tr = simulate(net, init, Scenario(0, "LG", 0.5, 0.1, ()),
                  SimulationConfig(t_end=0.1, t_fault=0.05, dt=0.01), record=True).trajectory
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,delta_1,delta_2,omega_1,omega_2"
    assert len(lines) == tr.t.size + 1
    assert all(len(x.split(",")) == 5 for x in lines[1:])


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(t_end=1.0, t_fault=2.0)
    with pytest.raises(ValueError):
        SimulationConfig(dt=0.0)
    assert FAULT_TYPES == ("LLL", "LLG", "LL", "LG")
