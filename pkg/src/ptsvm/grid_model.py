"""Network data model, IEEE Common Data Format I/O and admittance matrices.

The static network comes from an IEEE CDF file. Classical-model machine data
(inertia, transient reactance, damping) is not part of that format, so it is
read from a small sidecar text file with one record per generating bus::

    bus=1 H=5.0 xdp=0.25 D=2.0 mva=100.0

All quantities inside a :class:`Network` are per-unit on the system MVA base.
"""
from __future__ import annotations

import dataclasses
import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class GridModelError(ValueError):
    """Invalid network data."""


class CdfFormatError(GridModelError):
    """A record that does not follow the fixed-column layout."""

    def __init__(self, message: str, line: int, columns: tuple[int, int] | None = None):
        self.line = line
        self.columns = columns
        where = f"line {line}"
        if columns is not None:
            where += f", columns {columns[0]}-{columns[1]}"
        super().__init__(f"{where}: {message}")


class SingularNetworkError(GridModelError):
    """The eliminated block of a Kron reduction is singular."""


SLACK, PV, PQ = "slack", "PV", "PQ"
_CDF_BUS_KIND = {0: PQ, 1: PQ, 2: PV, 3: SLACK}
_KIND_CDF = {PQ: 0, PV: 2, SLACK: 3}

# (name, first column, last column), 1-based inclusive as in the format description.
_BUS_COLUMNS = (
    ("number", 1, 4),
    ("name", 6, 17),
    ("area", 19, 20),
    ("zone", 21, 23),
    ("type", 25, 26),
    ("v_final", 28, 33),
    ("angle_final", 34, 40),
    ("load_mw", 41, 49),
    ("load_mvar", 50, 58),
    ("gen_mw", 59, 67),
    ("gen_mvar", 68, 75),
    ("base_kv", 77, 83),
    ("v_desired", 85, 90),
    ("q_max", 91, 98),
    ("q_min", 99, 106),
    ("shunt_g", 107, 114),
    ("shunt_b", 115, 122),
    ("remote_bus", 124, 127),
)

_BRANCH_COLUMNS = (
    ("from_bus", 1, 4),
    ("to_bus", 6, 9),
    ("area", 11, 12),
    ("zone", 13, 14),
    ("circuit", 17, 17),
    ("type", 19, 19),
    ("r", 20, 29),
    ("x", 30, 40),
    ("b", 41, 50),
    ("rating1", 51, 55),
    ("rating2", 57, 61),
    ("rating3", 63, 67),
    ("control_bus", 69, 72),
    ("side", 74, 74),
    ("tap", 77, 82),
    ("shift", 84, 90),
    ("tap_min", 91, 97),
    ("tap_max", 98, 104),
    ("step", 106, 111),
    ("lim_min", 113, 119),
    ("lim_max", 120, 126),
)

_INT_FIELDS = {
    "number", "area", "zone", "type", "remote_bus", "from_bus", "to_bus", "circuit",
    "rating1", "rating2", "rating3", "control_bus", "side",
}


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_kv: float
    load_p: float = 0.0
    load_q: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    v_set: float = 1.0
    name: str = ""
    area: int = 1
    zone: int = 1
    v_final: float = 1.0
    angle_final: float = 0.0
    gen_p: float = 0.0
    gen_q: float = 0.0
    q_max: float = 0.0
    q_min: float = 0.0

    @property
    def has_load(self) -> bool:
        return self.load_p != 0.0 or self.load_q != 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    is_line: bool = True
    circuit: int = 1
    area: int = 1
    zone: int = 1


@dataclass(frozen=True)
class Generator:
    bus: int
    p_gen: float
    q_min: float
    q_max: float
    H: float
    x_d_prime: float
    D: float
    mva_base: float

    def __post_init__(self):
        if not self.H > 0:
            raise GridModelError(f"generator at bus {self.bus}: H must be > 0")
        if not self.x_d_prime > 0:
            raise GridModelError(f"generator at bus {self.bus}: x_d_prime must be > 0")
        if self.D < 0:
            raise GridModelError(f"generator at bus {self.bus}: D must be >= 0")
        if not self.mva_base > 0:
            raise GridModelError(f"generator at bus {self.bus}: mva_base must be > 0")


@dataclass(frozen=True)
class Network:
    """Immutable bus/branch/machine model of a power system.

    Machine parameters on :class:`Generator` are kept on the machine base as
    read from the sidecar; use :meth:`machine_params` for system-base values.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    mva_base: float = 100.0
    frequency: float = 60.0
    title: str = ""
    _index: Mapping[int, int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for k, bus in enumerate(self.buses):
            if bus.id in index:
                raise GridModelError(f"duplicate bus id {bus.id}")
            index[bus.id] = k
        object.__setattr__(self, "_index", index)
        for br in self.branches:
            if br.from_bus not in index or br.to_bus not in index:
                raise GridModelError(
                    f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise GridModelError(f"branch {br.from_bus}-{br.to_bus} is a self loop")
        for gen in self.generators:
            if gen.bus not in index:
                raise GridModelError(f"generator references unknown bus {gen.bus}")
        n_slack = sum(b.kind == SLACK for b in self.buses)
        if n_slack == 0:
            raise GridModelError("missing slack bus")
        if n_slack > 1:
            raise GridModelError("more than one slack bus")

    def bus_index(self, bus_id: int) -> int:
        return self._index[bus_id]

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def fault_lines(self) -> list[int]:
        """Indices into ``branches`` of the fault-eligible transmission lines."""
        return [k for k, br in enumerate(self.branches) if br.is_line]

    def line_rank(self, branch: int) -> int:
        """1-based position of ``branch`` among the fault-eligible lines."""
        lines = self.fault_lines
        if branch not in lines:
            raise GridModelError(f"branch {branch} is not fault-eligible")
        return lines.index(branch) + 1

    def machine_params(self) -> dict[str, np.ndarray]:
        """Machine constants converted to the system base, in generator order."""
        ratio = np.array([g.mva_base / self.mva_base for g in self.generators])
        return {
            "bus": np.array([g.bus for g in self.generators]),
            "H": np.array([g.H for g in self.generators]) * ratio,
            "x_d_prime": np.array([g.x_d_prime for g in self.generators]) / ratio,
            "D": np.array([g.D for g in self.generators]) * ratio,
        }

    def is_connected(self) -> bool:
        n = len(self.buses)
        if n == 0:
            return False
        rows = [self._index[br.from_bus] for br in self.branches]
        cols = [self._index[br.to_bus] for br in self.branches]
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_comp, _ = connected_components(graph, directed=False)
        return n_comp == 1

    def with_buses(self, buses: Iterable[Bus]) -> "Network":
        return dataclasses.replace(self, buses=tuple(buses), _index=None)

    def with_branches(self, branches: Iterable[Branch]) -> "Network":
        return dataclasses.replace(self, branches=tuple(branches), _index=None)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical CDF + sidecar serialization."""
        text = write_cdf(self) + "\n" + write_dynamics(self)
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class AdmittanceMatrix:
    nodes: tuple[int, ...]
    Y: np.ndarray

    @property
    def n(self) -> int:
        return len(self.nodes)

    def index(self, node: int) -> int:
        return self.nodes.index(node)


# ---------------------------------------------------------------------------
# CDF parsing
# ---------------------------------------------------------------------------

def _slice(line: str, first: int, last: int) -> str:
    return line[first - 1:last].strip()


def _parse_record(line: str, lineno: int, columns) -> dict:
    out = {}
    for name, first, last in columns:
        raw = _slice(line, first, last)
        if name == "name":
            out[name] = raw
            continue
        if raw == "":
            out[name] = 0 if name in _INT_FIELDS else 0.0
            continue
        try:
            out[name] = int(raw) if name in _INT_FIELDS else float(raw)
        except ValueError:
            raise CdfFormatError(f"cannot read {name} from {raw!r}", lineno, (first, last)) from None
    return out


def parse_dynamics(text: str) -> dict[int, dict[str, float]]:
    """Read the machine sidecar into ``{bus: {"H", "xdp", "D", "mva"}}``."""
    records = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise CdfFormatError(f"expected key=value, got {token!r}", lineno)
            fields[key] = value
        missing = {"bus", "H", "xdp", "D", "mva"} - fields.keys()
        if missing:
            raise CdfFormatError(f"dynamics record missing {sorted(missing)}", lineno)
        try:
            bus = int(fields["bus"])
            rec = {k: float(fields[k]) for k in ("H", "xdp", "D", "mva")}
        except ValueError as exc:
            raise CdfFormatError(str(exc), lineno) from None
        if bus in records:
            raise CdfFormatError(f"duplicate dynamics record for bus {bus}", lineno)
        records[bus] = rec
    return records


def parse_cdf(text: str, dynamics: str | Mapping[int, Mapping[str, float]] = "",
              frequency: float = 60.0) -> Network:
    """Parse an IEEE Common Data Format case plus its machine sidecar.

    ``dynamics`` is either the sidecar text or an already parsed mapping.
    Every PV or slack bus must have a machine record.
    """
    if isinstance(dynamics, str):
        dynamics = parse_dynamics(dynamics)
    lines = text.splitlines()
    if not lines:
        raise GridModelError("missing slack bus")
    title = lines[0]
    base_raw = _slice(title, 32, 37)
    try:
        mva_base = float(base_raw) if base_raw else 100.0
    except ValueError:
        raise CdfFormatError(f"cannot read MVA base from {base_raw!r}", 1, (32, 37)) from None

    buses: list[Bus] = []
    gen_rows: list[dict] = []
    branches: list[Branch] = []
    section = None
    for lineno, line in enumerate(lines[1:], start=2):
        head = line.strip().upper()
        if section is None:
            if head.startswith("BUS DATA FOLLOWS"):
                section = "bus"
            elif head.startswith("BRANCH DATA FOLLOWS"):
                section = "branch"
            elif head.startswith("END OF DATA"):
                break
            elif head.startswith("-9") or head.endswith("FOLLOWS") or "FOLLOWS" in head:
                section = "skip"
            continue
        if head.startswith("-9"):
            section = None
            continue
        if section == "skip" or not head:
            continue
        if section == "bus":
            rec = _parse_record(line, lineno, _BUS_COLUMNS)
            if rec["type"] not in _CDF_BUS_KIND:
                raise CdfFormatError(f"unknown bus type {rec['type']}", lineno, (25, 26))
            if rec["number"] <= 0:
                raise CdfFormatError("bus number must be positive", lineno, (1, 4))
            if rec["base_kv"] <= 0:
                raise CdfFormatError("base kV must be positive", lineno, (77, 83))
            kind = _CDF_BUS_KIND[rec["type"]]
            buses.append(Bus(
                id=rec["number"], kind=kind, base_kv=rec["base_kv"],
                load_p=rec["load_mw"] / mva_base, load_q=rec["load_mvar"] / mva_base,
                shunt_g=rec["shunt_g"], shunt_b=rec["shunt_b"],
                v_set=rec["v_desired"] if kind != PQ else 1.0,
                name=rec["name"], area=rec["area"], zone=rec["zone"],
                v_final=rec["v_final"], angle_final=rec["angle_final"],
                gen_p=rec["gen_mw"] / mva_base, gen_q=rec["gen_mvar"] / mva_base,
                q_max=rec["q_max"] / mva_base, q_min=rec["q_min"] / mva_base,
            ))
            if kind != PQ:
                gen_rows.append((lineno, buses[-1]))
        elif section == "branch":
            rec = _parse_record(line, lineno, _BRANCH_COLUMNS)
            if rec["shift"] != 0.0:
                raise CdfFormatError("phase-shifting transformers are not supported",
                                     lineno, (84, 90))
            if rec["r"] == 0.0 and rec["x"] == 0.0:
                raise CdfFormatError("zero-impedance branch", lineno, (20, 40))
            branches.append(Branch(
                from_bus=rec["from_bus"], to_bus=rec["to_bus"], r=rec["r"], x=rec["x"],
                b_charging=rec["b"], tap=rec["tap"] if rec["tap"] != 0.0 else 1.0,
                is_line=rec["type"] == 0, circuit=rec["circuit"],
                area=rec["area"], zone=rec["zone"],
            ))

    generators = []
    for lineno, bus in gen_rows:
        if bus.id not in dynamics:
            raise GridModelError(f"generator dynamic record missing for bus {bus.id}")
        d = dynamics[bus.id]
        generators.append(Generator(
            bus=bus.id, p_gen=bus.gen_p, q_min=bus.q_min, q_max=bus.q_max,
            H=d["H"], x_d_prime=d["xdp"], D=d["D"], mva_base=d["mva"],
        ))
    net = Network(tuple(buses), tuple(branches), tuple(generators),
                  mva_base=mva_base, frequency=frequency, title=title)
    if not net.is_connected():
        raise GridModelError("network is not a single island")
    return net


# ---------------------------------------------------------------------------
# CDF writing
# ---------------------------------------------------------------------------

def _fmt_num(value, width: int) -> str:
    if isinstance(value, (int, np.integer)):
        s = str(int(value))
    else:
        value = float(value)
        for digits in range(10, 0, -1):
            s = f"{value:.{digits}g}"
            if "e" not in s and "." not in s:
                s += ".0"
            if len(s) <= width:
                break
        if value == 0.0:
            s = "0.0"
    if len(s) > width:
        raise GridModelError(f"value {value!r} does not fit in {width} columns")
    return s.rjust(width)


def _format_record(values: dict, columns) -> str:
    buf = [" "] * columns[-1][2]
    for name, first, last in columns:
        width = last - first + 1
        v = values[name]
        s = str(v)[:width].ljust(width) if name == "name" else _fmt_num(v, width)
        buf[first - 1:last] = s
    return "".join(buf).rstrip()


def write_cdf(net: Network) -> str:
    """Serialize ``net`` in the fixed-column CDF layout."""
    base = net.mva_base
    title = net.title or f" {'':8} {'':20} {base:>6.1f}"
    out = [title, f"BUS DATA FOLLOWS{len(net.buses):>30d} ITEMS"]
    gen_by_bus = {g.bus: g for g in net.generators}
    for bus in net.buses:
        g = gen_by_bus.get(bus.id)
        out.append(_format_record({
            "number": bus.id, "name": bus.name, "area": bus.area, "zone": bus.zone,
            "type": _KIND_CDF[bus.kind], "v_final": bus.v_final,
            "angle_final": bus.angle_final, "load_mw": bus.load_p * base,
            "load_mvar": bus.load_q * base,
            "gen_mw": (g.p_gen if g else bus.gen_p) * base, "gen_mvar": bus.gen_q * base,
            "base_kv": bus.base_kv, "v_desired": bus.v_set if bus.kind != PQ else 0.0,
            "q_max": bus.q_max * base, "q_min": bus.q_min * base,
            "shunt_g": bus.shunt_g, "shunt_b": bus.shunt_b, "remote_bus": 0,
        }, _BUS_COLUMNS))
    out.append("-999")
    out.append(f"BRANCH DATA FOLLOWS{len(net.branches):>27d} ITEMS")
    for br in net.branches:
        zeros = dict.fromkeys(("rating1", "rating2", "rating3", "control_bus", "side"), 0)
        zeros.update(dict.fromkeys(("shift", "tap_min", "tap_max", "step", "lim_min",
                                    "lim_max"), 0.0))
        out.append(_format_record({
            "from_bus": br.from_bus, "to_bus": br.to_bus, "area": br.area, "zone": br.zone,
            "circuit": br.circuit, "type": 0 if br.is_line else 1,
            "r": br.r, "x": br.x, "b": br.b_charging,
            "tap": 0.0 if br.tap == 1.0 else br.tap, **zeros,
        }, _BRANCH_COLUMNS))
    out.append("-999")
    out.append("END OF DATA")
    return "\n".join(out) + "\n"


def write_dynamics(net: Network) -> str:
    rows = [f"bus={g.bus} H={g.H!r} xdp={g.x_d_prime!r} D={g.D!r} mva={g.mva_base!r}"
            for g in net.generators]
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Admittance matrices
# ---------------------------------------------------------------------------

def branch_admittances(br: Branch) -> tuple[complex, complex, complex, complex]:
    """Two-port entries (Yff, Yft, Ytf, Ytt) of a pi-model branch, tap on the from side."""
    if br.r == 0.0 and br.x == 0.0:
        raise GridModelError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
    ys = 1.0 / complex(br.r, br.x)
    ysh = 0.5j * br.b_charging
    t = br.tap
    return (ys + ysh) / (t * t), -ys / t, -ys / t, ys + ysh


def build_admittance(net: Network, load_voltages: Sequence[float] | None = None
                     ) -> AdmittanceMatrix:
    """Nodal admittance matrix of ``net``.

    With ``load_voltages`` (voltage magnitude per bus, in bus order) each load
    is added as the constant shunt ``(P - jQ)/|V|^2``; otherwise loads are
    ignored.
    """
    n = len(net.buses)
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        f, t = net.bus_index(br.from_bus), net.bus_index(br.to_bus)
        yff, yft, ytf, ytt = branch_admittances(br)
        Y[f, f] += yff
        Y[f, t] += yft
        Y[t, f] += ytf
        Y[t, t] += ytt
    for k, bus in enumerate(net.buses):
        Y[k, k] += complex(bus.shunt_g, bus.shunt_b)
    if load_voltages is not None:
        vm = np.asarray(load_voltages, dtype=float)
        if np.any(vm <= 0):
            raise GridModelError("load voltages must be positive")
        for k, bus in enumerate(net.buses):
            if bus.has_load:
                Y[k, k] += complex(bus.load_p, -bus.load_q) / vm[k] ** 2
    return AdmittanceMatrix(tuple(net.bus_ids), Y)


LAMBDA_MIN, LAMBDA_MAX = 0.01, 0.99


def insert_fault_node(net: Network, line: int, lam: float) -> Network:
    """Split fault-eligible branch ``line`` at fraction ``lam`` from its from-bus.

    The new fault node is appended as the last bus with id ``max(id) + 1``.
    ``lam`` is clamped to [0.01, 0.99] so neither segment has zero impedance.
    """
    if not 0 <= line < len(net.branches) or not net.branches[line].is_line:
        raise GridModelError(f"branch {line} is not fault-eligible")
    if not 0.0 <= lam <= 1.0:
        raise GridModelError(f"fault location {lam} outside [0, 1]")
    lam = min(max(lam, LAMBDA_MIN), LAMBDA_MAX)
    br = net.branches[line]
    fid = max(net.bus_ids) + 1
    kv = net.buses[net.bus_index(br.from_bus)].base_kv
    fbus = Bus(id=fid, kind=PQ, base_kv=kv, name="FAULT")
    seg1 = dataclasses.replace(br, to_bus=fid, r=br.r * lam, x=br.x * lam,
                               b_charging=br.b_charging * lam)
    seg2 = dataclasses.replace(br, from_bus=fid, r=br.r * (1 - lam), x=br.x * (1 - lam),
                               b_charging=br.b_charging * (1 - lam))
    branches = list(net.branches)
    branches[line:line + 1] = [seg1, seg2]
    return dataclasses.replace(net, buses=net.buses + (fbus,), branches=tuple(branches),
                               _index=None)


def remove_branch(net: Network, branch: int) -> Network:
    branches = list(net.branches)
    del branches[branch]
    return net.with_branches(branches)


def kron_reduce(Y: AdmittanceMatrix, keep: Iterable[int]) -> AdmittanceMatrix:
    """Eliminate every node not in ``keep``: ``Ykk - Yke Yee^-1 Yek``.

    The kept nodes are returned in their original order.
    """
    keep = set(keep)
    unknown = keep - set(Y.nodes)
    if unknown:
        raise GridModelError(f"unknown nodes {sorted(unknown)}")
    k_idx = [i for i, nd in enumerate(Y.nodes) if nd in keep]
    e_idx = [i for i, nd in enumerate(Y.nodes) if nd not in keep]
    nodes = tuple(Y.nodes[i] for i in k_idx)
    Ykk = Y.Y[np.ix_(k_idx, k_idx)]
    if not e_idx:
        return AdmittanceMatrix(nodes, Ykk.copy())
    Yee = Y.Y[np.ix_(e_idx, e_idx)]
    Yke = Y.Y[np.ix_(k_idx, e_idx)]
    Yek = Y.Y[np.ix_(e_idx, k_idx)]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu, piv = scipy.linalg.lu_factor(Yee, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularNetworkError(f"eliminated block is singular: {exc}") from None
    diag = np.abs(np.diag(lu))
    if diag.min() <= 1e-12 * max(diag.max(), 1.0):
        raise SingularNetworkError("eliminated block is singular (isolated node?)")
    return AdmittanceMatrix(nodes, Ykk - Yke @ scipy.linalg.lu_solve((lu, piv), Yek))
