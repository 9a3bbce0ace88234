"""Monte Carlo scenario sampling, dataset generation and fold assignment."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import SimulationConfig, reduced_networks, simulate
from .grid_model import Network
from .powerflow import PowerFlowError, init_machines, solve_power_flow

log = logging.getLogger(__name__)

# cumulative fault-type law, in sampling order
FAULT_TYPE_CDF = (("LLL", 0.05), ("LL", 0.15), ("LLG", 0.30), ("LG", 1.0))
FAULT_SEVERITY = {"LG": 1, "LL": 2, "LLG": 3, "LLL": 4}
SEVERITY_TYPE = {v: k for k, v in FAULT_SEVERITY.items()}

FCT_MEAN, FCT_SD = 0.9, 0.1
LOAD_SD = 0.1
LOAD_FLOOR = 0.1

FEATURES_4 = ("load", "ftype", "floc", "fct")
FEATURES_5 = ("load", "ftype", "line", "floc", "fct")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scenario:
    """One Monte Carlo draw. ``line`` indexes ``Network.branches``."""

    line: int
    fault_type: str
    lam: float
    fct: float
    load_scale: tuple[float, ...]

    def __post_init__(self):
        if self.fault_type not in FAULT_SEVERITY:
            raise ValueError(f"unknown fault type {self.fault_type!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.fct < 0:
            raise ValueError("fct must be non-negative")
        if any(s <= 0 for s in self.load_scale):
            raise ValueError("load multipliers must be positive")


def sample_fault_type(u: float) -> str:
    if not 0.0 <= u < 1.0:
        raise ValueError("u must lie in [0, 1)")
    for name, upper in FAULT_TYPE_CDF:
        if u < upper:
            return name
    return FAULT_TYPE_CDF[-1][0]


def load_buses(net: Network) -> list[int]:
    return [b.id for b in net.buses if b.has_load]


def sample_scenario(line: int, rng: np.random.Generator, n_loads: int,
                    fct_max: float = 9.0) -> Scenario:
    """Draw location, fault type, clearing time and load multipliers, in that order.

    Clearing times outside ``(0, fct_max)`` and load multipliers at or below
    0.1 are redrawn.
    """
    lam = float(rng.random())
    ftype = sample_fault_type(float(rng.random()))
    fct = FCT_MEAN + FCT_SD * float(rng.standard_normal())
    while not 0.0 < fct < fct_max:
        fct = FCT_MEAN + FCT_SD * float(rng.standard_normal())
    scale = []
    for _ in range(n_loads):
        s = 1.0 + LOAD_SD * float(rng.standard_normal())
        while s <= LOAD_FLOOR:
            s = 1.0 + LOAD_SD * float(rng.standard_normal())
        scale.append(s)
    return Scenario(line, ftype, lam, fct, tuple(scale))


def apply_load_scale(net: Network, scale) -> Network:
    """Scale each load (P and Q together) by its multiplier."""
    scale = iter(scale)
    buses = []
    for b in net.buses:
        if b.has_load:
            s = next(scale)
            b = dataclasses.replace(b, load_p=b.load_p * s, load_q=b.load_q * s)
        buses.append(b)
    return net.with_buses(buses)


def encode_features(s: Scenario, net: Network, extended: bool = False) -> tuple[float, ...]:
    """Feature row for ``s``.

    Default: (total load in p.u. of base, severity ordinal, global fault
    coordinate ``(rank - 1 + lam) / n_lines``, fct). ``extended`` splits the
    coordinate into line rank and ``lam``.
    """
    base = [b.load_p for b in net.buses if b.has_load]
    load = sum(p * k for p, k in zip(base, s.load_scale)) / sum(base)
    rank = net.line_rank(s.line)
    sev = float(FAULT_SEVERITY[s.fault_type])
    if extended:
        return (load, sev, float(rank), s.lam, s.fct)
    return (load, sev, (rank - 1 + s.lam) / len(net.fault_lines), s.fct)


def row_rng(seed: int, line_rank: int, sample: int) -> np.random.Generator:
    return np.random.default_rng([seed, line_rank, sample])


def evaluate_scenario(net: Network, s: Scenario, cfg: SimulationConfig = SimulationConfig()):
    """Scale loads, solve the flow, initialize machines and simulate one scenario."""
    scaled = apply_load_scale(net, s.load_scale)
    sol = solve_power_flow(scaled)
    init = init_machines(scaled, sol)
    return simulate(scaled, init, s, cfg, reduced=reduced_networks(scaled, init, s))


def _run_row(args):
    net, line, rank, sample, seed, cfg = args
    rng = row_rng(seed, rank, sample)
    n_loads = len(load_buses(net))
    resamples = 0
    while True:
        s = sample_scenario(line, rng, n_loads, cfg.t_end - cfg.t_fault)
        try:
            out = evaluate_scenario(net, s, cfg)
        except PowerFlowError:
            resamples += 1
            if resamples > 100:
                raise GenerationError(f"line rank {rank} sample {sample}: power flow "
                                      f"keeps diverging") from None
            continue
        return s, out, resamples


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    seed: int | None = None
    network_fingerprint: str = ""
    scenarios: tuple[Scenario, ...] = ()
    resamples: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return self.labels.shape[0]

    def to_csv(self) -> str:
        rows = [",".join(self.feature_names + ("label",))]
        for x, y in zip(self.features, self.labels):
            rows.append(",".join(format(float(v), ".17g") for v in x) + f",{int(y)}")
        return "\n".join(rows) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "network": self.network_fingerprint,
            "rows": len(self),
            "features": list(self.feature_names),
            "unstable": int(self.labels.sum()),
            "resamples": self.resamples,
            "config": self.extra,
            "scenarios": [
                {"line": s.line, "fault_type": s.fault_type, "lam": s.lam, "fct": s.fct,
                 "load_scale": list(s.load_scale)} for s in self.scenarios],
        }


def generate_dataset(net: Network, samples_per_line: int, seed: int,
                     cfg: SimulationConfig = SimulationConfig(), extended: bool = False,
                     jobs: int = 1) -> Dataset:
    """Simulate ``samples_per_line`` scenarios on every fault-eligible line.

    Rows are ordered by (line rank, sample); each row draws from its own
    random stream so the result does not depend on ``jobs``.
    """
    if samples_per_line < 1:
        raise ValueError("samples_per_line must be >= 1")
    sol = solve_power_flow(net)
    if sol.max_mismatch > 1e-6:
        raise GenerationError("base-case power flow did not converge")
    tasks = [(net, line, rank, s, seed, cfg)
             for rank, line in enumerate(net.fault_lines, start=1)
             for s in range(samples_per_line)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_row, tasks, chunksize=max(1, len(tasks) // (8 * jobs))))
    else:
        results = [_run_row(t) for t in tasks]
    resamples = sum(r[2] for r in results)
    if resamples > 0.01 * len(tasks):
        raise GenerationError(f"{resamples} power-flow resamples for {len(tasks)} rows "
                              f"exceeds 1%")
    scen = tuple(r[0] for r in results)
    X = np.array([encode_features(s, net, extended) for s in scen], dtype=float)
    y = np.array([r[1].label for r in results], dtype=int)
    return Dataset(
        features=X, labels=y, feature_names=FEATURES_5 if extended else FEATURES_4,
        seed=seed, network_fingerprint=net.fingerprint(), scenarios=scen,
        resamples=resamples,
        extra={"samples_per_line": samples_per_line, "t_end": cfg.t_end,
               "t_fault": cfg.t_fault, "dt": cfg.dt, "angle_ceiling": cfg.angle_ceiling,
               "extended": extended},
    )


def write_dataset(ds: Dataset, path: str | os.PathLike) -> Path:
    """Write the CSV and its ``.meta.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    path.write_text(ds.to_csv())
    meta = path.with_suffix(path.suffix + ".meta.json")
    meta.write_text(json.dumps(ds.metadata(), indent=1, sort_keys=True) + "\n")
    return meta


def parse_dataset_csv(text: str) -> Dataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty dataset file")
    header = tuple(lines[0].split(","))
    if header[-1] != "label" or header[:-1] not in (FEATURES_4, FEATURES_5):
        raise ValueError(f"unexpected dataset header {lines[0]!r}")
    X, y = [], []
    for k, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != len(header):
            raise ValueError(f"line {k}: expected {len(header)} fields")
        try:
            X.append([float(v) for v in parts[:-1]])
            y.append(int(parts[-1]))
        except ValueError as exc:
            raise ValueError(f"line {k}: {exc}") from None
    return Dataset(np.array(X, dtype=float).reshape(len(X), len(header) - 1),
                   np.array(y, dtype=int), header[:-1])


def read_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    ds = parse_dataset_csv(path.read_text())
    meta = path.with_suffix(path.suffix + ".meta.json")
    if meta.exists():
        info = json.loads(meta.read_text())
        ds = dataclasses.replace(ds, seed=info.get("seed"),
                                 network_fingerprint=info.get("network", ""),
                                 resamples=info.get("resamples", 0))
    return ds


@dataclass(frozen=True)
class FoldAssignment:
    K: int
    fold_of: np.ndarray

    def test_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def train_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.K)


def kfold_split(N: int, K: int, seed: int, labels=None) -> FoldAssignment:
    """Seeded shuffle, then round-robin fold assignment.

    With ``labels`` the shuffle is done per class and the classes are dealt
    one after the other, so every fold gets within one row of each class's
    share.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    if K > N:
        raise ValueError(f"K = {K} exceeds the number of rows {N}")
    rng = np.random.default_rng(seed)
    if labels is None:
        order = rng.permutation(N)
    else:
        labels = np.asarray(labels)
        if labels.shape[0] != N:
            raise ValueError("labels length differs from N")
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c))
                                for c in np.unique(labels)])
    fold_of = np.empty(N, dtype=int)
    fold_of[order] = np.arange(N) % K
    return FoldAssignment(K, fold_of)
