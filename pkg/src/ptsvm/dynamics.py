"""Classical-model multi-machine transient simulation.

Each machine is a constant EMF behind its transient reactance. The network
is Kron-reduced to the machine internal nodes for three topologies
(pre-fault, fault-on, post-fault) and the swing equations

    M_i dw_i/dt = Pm_i - Pe_i - D_i w_i / ws,     d(delta_i)/dt = w_i

are integrated with fixed-step RK4, with ``M_i = 2 H_i / ws`` and the speed
deviation ``w`` in rad/s. Switching instants that fall between grid points are
hit exactly by splitting the step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from numba import njit

from .grid_model import (AdmittanceMatrix, GridModelError, Network, build_admittance,
                         insert_fault_node, kron_reduce, remove_branch)
from .powerflow import MachineInit

if TYPE_CHECKING:
    from .scenario import Scenario

FAULT_TYPES = ("LLL", "LLG", "LL", "LG")
BOLTED_ADMITTANCE = 1e6

# positive-sequence fault impedance as a multiple of the Thevenin impedance,
# with Z2 = Z1 and Z0 = 3 Z1
_FAULT_Z_FACTOR = {"LLG": 0.75, "LL": 1.0, "LG": 4.0}


class SimulationError(RuntimeError):
    pass


class IslandingError(SimulationError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    t_end: float = 10.0
    t_fault: float = 1.0
    dt: float = 0.005
    angle_ceiling: float = 2000.0

    def __post_init__(self):
        if not 0 < self.t_fault < self.t_end:
            raise ValueError("need 0 < t_fault < t_end")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    delta: np.ndarray
    omega: np.ndarray

    def to_csv(self) -> str:
        m = self.delta.shape[1]
        header = ["t"] + [f"delta_{i + 1}" for i in range(m)] + [f"omega_{i + 1}" for i in range(m)]
        rows = [",".join(header)]
        for k in range(self.t.size):
            vals = [self.t[k], *self.delta[k], *self.omega[k]]
            rows.append(",".join(f"{v:.10g}" for v in vals))
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class SimOutcome:
    delta_max: float
    tsi: float
    label: int
    early_exit: bool
    t_stop: float
    trajectory: Trajectory | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class FaultShunt:
    y_f: complex


@dataclass(frozen=True)
class ReducedNetworks:
    """Machine-node admittance matrices for the three stages, plus the fault shunt."""

    pre: np.ndarray
    fault: np.ndarray
    post: np.ndarray
    shunt: FaultShunt | None
    z_thev: complex | None = None


def compute_tsi(delta_max: float) -> float:
    """Transient stability index from the peak rotor-angle separation in degrees."""
    if delta_max < 0:
        raise ValueError("delta_max must be non-negative")
    return (360.0 - delta_max) / (360.0 + delta_max)


def label(tsi: float) -> int:
    """1 (unstable) when the index is negative, else 0."""
    return 1 if tsi < 0 else 0


def effective_fault_admittance(fault_type: str, z_thev: complex) -> FaultShunt:
    """Positive-sequence shunt representing an unbalanced fault."""
    if fault_type == "LLL":
        return FaultShunt(complex(BOLTED_ADMITTANCE, 0.0))
    if fault_type not in _FAULT_Z_FACTOR:
        raise ValueError(f"unknown fault type {fault_type!r}")
    if abs(z_thev) == 0:
        raise ValueError("Thevenin impedance must be nonzero")
    return FaultShunt(1.0 / (_FAULT_Z_FACTOR[fault_type] * z_thev))


def _augment(net: Network, init: MachineInit, vm: np.ndarray) -> AdmittanceMatrix:
    """Bus matrix with loads as shunts plus one internal node per machine."""
    ybus = build_admittance(net, load_voltages=vm)
    n, m = ybus.n, init.bus.size
    Y = np.zeros((n + m, n + m), dtype=complex)
    Y[:n, :n] = ybus.Y
    first = max(net.bus_ids) + 1
    for i, (bus, xd) in enumerate(zip(init.bus, init.x_d_prime)):
        k, a = net.bus_index(int(bus)), n + i
        y = 1.0 / (1j * xd)
        Y[k, k] += y
        Y[a, a] += y
        Y[k, a] -= y
        Y[a, k] -= y
    return AdmittanceMatrix(ybus.nodes + tuple(range(first, first + m)), Y)


def _internal_nodes(Y: AdmittanceMatrix, m: int) -> tuple[int, ...]:
    return Y.nodes[-m:]


def thevenin_impedance(net: Network, init: MachineInit, node: int,
                       vm: np.ndarray | None = None) -> complex:
    """Driving-point impedance at bus ``node`` with machine EMFs shorted."""
    if vm is None:
        vm = _bus_vm(net, init)
    Y = _augment(net, init, vm)
    n = len(net.buses)
    k = net.bus_index(node)
    e = np.zeros(n, dtype=complex)
    e[k] = 1.0
    return complex(np.linalg.solve(Y.Y[:n, :n], e)[k])


def _bus_vm(net: Network, init: MachineInit) -> np.ndarray:
    sol = init.solution
    idx = {b: k for k, b in enumerate(sol.bus_ids)}
    return np.array([abs(sol.V[idx[b]]) if b in idx else 1.0 for b in net.bus_ids])


def reduced_networks(net: Network, init: MachineInit, scenario: "Scenario | None"
                     ) -> ReducedNetworks:
    """Pre-fault, fault-on and post-fault matrices reduced to machine nodes.

    Loads are frozen as constant admittances at the solved voltages. The
    fault is cleared by tripping the faulted line.
    """
    m = init.bus.size
    vm = _bus_vm(net, init)
    aug = _augment(net, init, vm)
    pre = kron_reduce(aug, _internal_nodes(aug, m)).Y
    if scenario is None or scenario.fct <= 0:
        return ReducedNetworks(pre, pre, pre, None)

    line = scenario.line
    faulted = insert_fault_node(net, line, scenario.lam)
    fid = faulted.buses[-1].id
    vm_f = np.append(vm, 1.0)
    z_thev = thevenin_impedance(faulted, init, fid, vm_f)
    shunt = effective_fault_admittance(scenario.fault_type, z_thev)
    aug_f = _augment(faulted, init, vm_f)
    k = aug_f.index(fid)
    Yf = aug_f.Y.copy()
    Yf[k, k] += shunt.y_f
    fault = kron_reduce(AdmittanceMatrix(aug_f.nodes, Yf), _internal_nodes(aug_f, m)).Y

    tripped = remove_branch(net, line)
    if not tripped.is_connected():
        raise IslandingError(f"tripping branch {line} islands part of the network")
    aug_p = _augment(tripped, init, vm)
    post = kron_reduce(aug_p, _internal_nodes(aug_p, m)).Y
    return ReducedNetworks(pre, fault, post, shunt, z_thev)


def electrical_power(Y: np.ndarray, E: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Machine electrical output ``Re(E_i conj((Y E)_i))`` for EMF phasors ``E e^{j delta}``."""
    ph = E * np.exp(1j * delta)
    return (ph * np.conj(Y @ ph)).real


@njit(cache=True)
def _pe(G, B, E, delta, out):
    m = E.size
    for i in range(m):
        s = E[i] * E[i] * G[i, i]
        for j in range(m):
            if j != i:
                d = delta[i] - delta[j]
                s += E[i] * E[j] * (G[i, j] * math.cos(d) + B[i, j] * math.sin(d))
        out[i] = s


@njit(cache=True)
def _deriv(G, B, E, Pm, M, Dw, delta, omega, pe, ddelta, domega):
    _pe(G, B, E, delta, pe)
    for i in range(E.size):
        ddelta[i] = omega[i]
        domega[i] = (Pm[i] - pe[i] - Dw[i] * omega[i]) / M[i]


@njit(cache=True)
def _rk4(G, B, E, Pm, M, Dw, delta, omega, h, w):
    # w: (10, m) scratch
    m = E.size
    pe, k1d, k1w, k2d, k2w, k3d, k3w, k4d, k4w, tmp = (
        w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7], w[8], w[9])
    tmpw = np.empty(m)
    _deriv(G, B, E, Pm, M, Dw, delta, omega, pe, k1d, k1w)
    for i in range(m):
        tmp[i] = delta[i] + 0.5 * h * k1d[i]
        tmpw[i] = omega[i] + 0.5 * h * k1w[i]
    _deriv(G, B, E, Pm, M, Dw, tmp, tmpw, pe, k2d, k2w)
    for i in range(m):
        tmp[i] = delta[i] + 0.5 * h * k2d[i]
        tmpw[i] = omega[i] + 0.5 * h * k2w[i]
    _deriv(G, B, E, Pm, M, Dw, tmp, tmpw, pe, k3d, k3w)
    for i in range(m):
        tmp[i] = delta[i] + h * k3d[i]
        tmpw[i] = omega[i] + h * k3w[i]
    _deriv(G, B, E, Pm, M, Dw, tmp, tmpw, pe, k4d, k4w)
    for i in range(m):
        delta[i] += h / 6.0 * (k1d[i] + 2.0 * k2d[i] + 2.0 * k3d[i] + k4d[i])
        omega[i] += h / 6.0 * (k1w[i] + 2.0 * k2w[i] + 2.0 * k3w[i] + k4w[i])


@njit(cache=True)
def _spread(delta):
    lo = delta[0]
    hi = delta[0]
    for i in range(1, delta.size):
        if delta[i] < lo:
            lo = delta[i]
        if delta[i] > hi:
            hi = delta[i]
    return hi - lo


@njit(cache=True)
def _integrate(G3, B3, t_switch, E, Pm, M, Dw, delta0, omega0, dt, t_end, ceiling,
               record, t_out, d_out, w_out):
    """Returns (spread_max, status, t_stop, n_recorded); status 0 ok, 1 ceiling, 2 non-finite."""
    m = E.size
    delta = delta0.copy()
    omega = omega0.copy()
    work = np.empty((10, m))
    n_steps = int(math.ceil(t_end / dt - 1e-9))
    stage = 0
    while stage < t_switch.size and t_switch[stage] <= 0.0:
        stage += 1
    t = 0.0
    spread_max = _spread(delta)
    n_rec = 0
    if record:
        t_out[0] = 0.0
        d_out[0, :] = delta
        w_out[0, :] = omega
        n_rec = 1
    for n in range(n_steps):
        t_next = min((n + 1) * dt, t_end)
        while t < t_next:
            target = t_next
            if stage < t_switch.size and t_switch[stage] < t_next:
                target = t_switch[stage]
            h = target - t
            if h > 0.0:
                _rk4(G3[stage], B3[stage], E, Pm, M, Dw, delta, omega, h, work)
            t = target
            while stage < t_switch.size and t_switch[stage] <= t:
                stage += 1
            for i in range(m):
                if not (math.isfinite(delta[i]) and math.isfinite(omega[i])):
                    return spread_max, 2, t, n_rec
            s = _spread(delta)
            if s > spread_max:
                spread_max = s
            if record:
                t_out[n_rec] = t
                d_out[n_rec, :] = delta
                w_out[n_rec, :] = omega
                n_rec += 1
            if spread_max > ceiling:
                return spread_max, 1, t, n_rec
    return spread_max, 0, t, n_rec


def simulate(net: Network, init: MachineInit, scenario: "Scenario | None",
             cfg: SimulationConfig = SimulationConfig(), record: bool = False,
             reduced: ReducedNetworks | None = None) -> SimOutcome:
    """Run one fault scenario and classify it.

    ``net`` must already carry the scenario loads and ``init`` must come from
    a power flow of that network. A scenario with ``fct == 0`` (or ``None``)
    applies no disturbance. When the fault is never cleared inside the window
    the outcome is judged on the fault-on trajectory alone.
    """
    if reduced is None:
        reduced = reduced_networks(net, init, scenario)
    params = net.machine_params()
    ws = 2 * math.pi * net.frequency
    M = 2 * params["H"] / ws
    Dw = params["D"] / ws
    Y3 = np.stack([reduced.pre, reduced.fault, reduced.post])
    if scenario is None or scenario.fct <= 0:
        t_switch = np.array([np.inf, np.inf])
    else:
        t_clear = cfg.t_fault + scenario.fct
        t_switch = np.array([cfg.t_fault, t_clear if t_clear < cfg.t_end else np.inf])
    m = init.bus.size
    n_max = int(math.ceil(cfg.t_end / cfg.dt)) + t_switch.size + 2 if record else 1
    t_out = np.zeros(n_max)
    d_out = np.zeros((n_max, m))
    w_out = np.zeros((n_max, m))
    spread, status, t_stop, n_rec = _integrate(
        np.ascontiguousarray(Y3.real), np.ascontiguousarray(Y3.imag), t_switch,
        init.E_mag.astype(float), init.P_m.astype(float), M, Dw,
        init.delta0.astype(float), np.zeros(m), float(cfg.dt), float(cfg.t_end),
        math.radians(cfg.angle_ceiling), record, t_out, d_out, w_out)
    if status == 2:
        raise SimulationError(f"non-finite machine state at t = {t_stop:.6g} s")
    delta_max = math.degrees(spread)
    tsi = compute_tsi(delta_max)
    traj = Trajectory(t_out[:n_rec], d_out[:n_rec], w_out[:n_rec]) if record else None
    return SimOutcome(delta_max, tsi, label(tsi), status == 1, t_stop, traj)


__all__ = [
    "FAULT_TYPES", "FaultShunt", "GridModelError", "IslandingError", "ReducedNetworks",
    "SimOutcome", "SimulationConfig", "SimulationError", "Trajectory", "compute_tsi",
    "effective_fault_admittance", "electrical_power", "label", "reduced_networks",
    "simulate", "thevenin_impedance",
]
