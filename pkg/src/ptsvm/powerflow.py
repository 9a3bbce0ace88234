"""Newton-Raphson AC power flow and classical machine initialization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_model import PQ, PV, SLACK, Network, build_admittance


class PowerFlowError(RuntimeError):
    """Newton-Raphson did not converge or hit a singular Jacobian."""

    def __init__(self, message: str, max_mismatch: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.max_mismatch = max_mismatch
        self.iterations = iterations


@dataclass(frozen=True)
class PowerFlowSolution:
    bus_ids: tuple[int, ...]
    V: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    iterations: int
    max_mismatch: float
    kinds: tuple[str, ...]
    mismatch_history: tuple[float, ...] = ()

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.V)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.V)


@dataclass(frozen=True)
class MachineInit:
    """Internal EMF, rotor angle and mechanical power per machine (generator order)."""

    bus: np.ndarray
    E_mag: np.ndarray
    delta0: np.ndarray
    P_m: np.ndarray
    x_d_prime: np.ndarray
    solution: PowerFlowSolution


def _dS_dV(Y, V):
    ibus = Y @ V
    vnorm = V / np.abs(V)
    dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(vnorm)) + np.diag(np.conj(ibus) * vnorm)
    dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(ibus) - Y @ np.diag(V))
    return dS_dVm, dS_dVa


def _newton(Y, V, s_spec, pv, pq, tol, max_iter):
    pvpq = np.r_[pv, pq]
    history = []
    for it in range(max_iter + 1):
        mis = V * np.conj(Y @ V) - s_spec
        F = np.r_[mis.real[pvpq], mis.imag[pq]]
        norm = float(np.max(np.abs(F))) if F.size else 0.0
        history.append(norm)
        if norm <= tol:
            return V, it, history
        if it == max_iter:
            break
        dS_dVm, dS_dVa = _dS_dV(Y, V)
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = -np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            raise PowerFlowError("singular Jacobian", norm, it) from None
        va = np.angle(V)
        vm = np.abs(V)
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        V = vm * np.exp(1j * va)
        if not np.all(np.isfinite(V)):
            raise PowerFlowError("power flow diverged to non-finite voltages", norm, it)
    raise PowerFlowError(
        f"power flow did not converge in {max_iter} iterations "
        f"(max mismatch {history[-1]:.3e} p.u.)", history[-1], max_iter)


def solve_power_flow(net: Network, tol: float = 1e-8, max_iter: int = 20,
                     enforce_q_limits: bool = True) -> PowerFlowSolution:
    """Solve the AC power flow from a flat start.

    PV buses whose reactive output leaves ``[q_min, q_max]`` are switched to
    PQ at the violated limit and the flow is re-solved. A bus with
    ``q_min == q_max`` is treated as unlimited.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    Y = build_admittance(net).Y
    kinds = [b.kind for b in net.buses]
    load = np.array([complex(b.load_p, b.load_q) for b in net.buses])
    gen = np.array([complex(b.gen_p, b.gen_q) for b in net.buses])
    gen_p = {g.bus: g.p_gen for g in net.generators}
    for k, b in enumerate(net.buses):
        if b.id in gen_p:
            gen[k] = complex(gen_p[b.id], gen[k].imag)
    vm0 = np.array([b.v_set if b.kind != PQ else 1.0 for b in net.buses])
    V = vm0.astype(complex)
    q_fixed = {}

    total_it = 0
    history: list[float] = []
    for _outer in range(len(net.buses) + 1):
        pv = np.array([k for k, kd in enumerate(kinds) if kd == PV], dtype=int)
        pq = np.array([k for k, kd in enumerate(kinds) if kd == PQ], dtype=int)
        s_gen = gen.copy()
        for k, q in q_fixed.items():
            s_gen[k] = complex(gen[k].real, q)
        s_spec = s_gen - load
        try:
            V, it, hist = _newton(Y, V, s_spec, pv, pq, tol, max_iter)
        except PowerFlowError as exc:
            exc.iterations += total_it
            raise
        total_it += it
        history.extend(hist)
        s_inj = V * np.conj(Y @ V)
        if not enforce_q_limits:
            break
        switched = False
        for k in pv:
            bus = net.buses[k]
            if bus.q_max <= bus.q_min:
                continue
            qg = s_inj[k].imag + bus.load_q
            if qg > bus.q_max + tol:
                q_fixed[k], kinds[k], switched = bus.q_max, PQ, True
            elif qg < bus.q_min - tol:
                q_fixed[k], kinds[k], switched = bus.q_min, PQ, True
        if not switched:
            break

    s_inj = V * np.conj(Y @ V)
    return PowerFlowSolution(
        bus_ids=tuple(net.bus_ids), V=V, p_inj=s_inj.real, q_inj=s_inj.imag,
        iterations=total_it, max_mismatch=history[-1], kinds=tuple(kinds),
        mismatch_history=tuple(history),
    )


def init_machines(net: Network, sol: PowerFlowSolution) -> MachineInit:
    """Classical-model initial state: ``E = V_t + j x'd I_t`` per machine."""
    params = net.machine_params()
    idx = {b: k for k, b in enumerate(sol.bus_ids)}
    E = np.empty(len(net.generators), dtype=complex)
    I = np.empty_like(E)
    for m, gen in enumerate(net.generators):
        if gen.bus not in idx:
            raise ValueError(f"machine bus {gen.bus} missing from the power-flow solution")
        k = idx[gen.bus]
        bus = net.buses[net.bus_index(gen.bus)]
        s_gen = complex(sol.p_inj[k] + bus.load_p, sol.q_inj[k] + bus.load_q)
        vt = sol.V[k]
        I[m] = np.conj(s_gen / vt)
        E[m] = vt + 1j * params["x_d_prime"][m] * I[m]
    return MachineInit(
        bus=params["bus"], E_mag=np.abs(E), delta0=np.angle(E),
        P_m=(E * np.conj(I)).real, x_d_prime=params["x_d_prime"], solution=sol,
    )


def write_solution(sol: PowerFlowSolution) -> str:
    """Fixed-decimal solved-case dump: bus, |V|, angle (deg), P, Q."""
    rows = ["bus,vm,va_deg,p,q"]
    for k, b in enumerate(sol.bus_ids):
        rows.append(f"{b},{sol.vm[k]:.10g},{np.degrees(sol.va[k]):.10g},"
                    f"{sol.p_inj[k]:.10g},{sol.q_inj[k]:.10g}")
    return "\n".join(rows) + "\n"
