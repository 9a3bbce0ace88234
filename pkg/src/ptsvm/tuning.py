"""Cross-validated hyperparameter search over (C, gamma)."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .metrics import ca, confusion, roc_auc
from .scenario import Dataset, FoldAssignment, kfold_split
from .svm import KernelSpec, TrainConfig, fit_precomputed, fit_scaler, kernel_matrix

OBJECTIVES = ("ca", "auc")
KERNEL_NAMES = ("linear", "poly2", "poly3", "rbf", "sigmoid")


class TuningError(RuntimeError):
    pass


def kernel_from_name(name: str, gamma: float | None = None) -> KernelSpec:
    """``linear``, ``polyN`` (coef0 = 1), ``rbf`` or ``sigmoid``."""
    if name == "linear":
        return KernelSpec.linear()
    if name == "rbf":
        return KernelSpec.rbf(1.0 if gamma is None else gamma)
    if name == "sigmoid":
        return KernelSpec.sigmoid(1.0 if gamma is None else gamma)
    if name.startswith("poly") and name[4:].isdigit():
        return KernelSpec.poly(int(name[4:]))
    raise TuningError(f"unknown kernel name {name!r}")


@dataclass(frozen=True)
class Candidate:
    kernel: str
    log2C: float
    log2gamma: float | None = None

    @property
    def C(self) -> float:
        return 2.0 ** self.log2C

    @property
    def gamma(self) -> float | None:
        return None if self.log2gamma is None else 2.0 ** self.log2gamma

    def kernel_spec(self) -> KernelSpec:
        return kernel_from_name(self.kernel, self.gamma)


@dataclass(frozen=True)
class SearchSpace:
    """log2 grids. Kernels without a gamma ignore ``log2gamma``."""

    log2C: tuple[float, ...] = tuple(range(-5, 16, 2))
    log2gamma: tuple[float, ...] = tuple(range(-15, 4, 2))
    kernels: tuple[str, ...] = ("rbf",)

    def __post_init__(self):
        if not self.log2C or not self.kernels:
            raise TuningError("empty search grid")
        if any(kernel_from_name(k).uses_gamma for k in self.kernels) and not self.log2gamma:
            raise TuningError("empty gamma grid")
        for v in (*self.log2C, *self.log2gamma):
            if not math.isfinite(v):
                raise TuningError("grid values must be finite")

    def candidates(self) -> list[Candidate]:
        out = []
        for name in self.kernels:
            gammas = self.log2gamma if kernel_from_name(name).uses_gamma else (None,)
            for c in self.log2C:
                for g in gammas:
                    out.append(Candidate(name, float(c), None if g is None else float(g)))
        return out


@dataclass(frozen=True)
class CandidateScore:
    candidate: Candidate
    fold_scores: tuple[float, ...]
    converged: bool

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_scores))

    @property
    def sd(self) -> float:
        return float(np.std(self.fold_scores))


@dataclass(frozen=True)
class TuneResult:
    best: Candidate
    table: tuple[CandidateScore, ...]
    folds: int
    objective: str = "ca"
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def best_score(self) -> CandidateScore:
        return next(s for s in self.table if s.candidate == self.best)

    def to_csv(self) -> str:
        def g(v):
            return "" if v is None else repr(float(v))

        rows = [f"kernel,log2C,log2gamma,mean_{self.objective},sd_{self.objective}"]
        for s in self.table:
            c = s.candidate
            flag = "" if s.converged else ",nonconverged"
            rows.append(f"{c.kernel},{g(c.log2C)},{g(c.log2gamma)},{s.mean!r},{s.sd!r}{flag}")
        b = self.best_score
        rows.append(f"best,{g(self.best.log2C)},{g(self.best.log2gamma)},{b.mean!r},{b.sd!r}")
        return "\n".join(rows) + "\n"


def parse_tune_csv(text: str) -> tuple[str, float, float | None]:
    """Best (kernel, C, gamma) from a tune report."""
    lines = text.strip().splitlines()
    head = lines[0].split(",")
    if head[:3] != ["kernel", "log2C", "log2gamma"]:
        raise TuningError("not a tune report")
    best = [ln for ln in lines[1:] if ln.startswith("best,")]
    if not best:
        raise TuningError("tune report has no best line")
    _, lc, lg, *_ = best[-1].split(",")
    for ln in lines[1:]:
        parts = ln.split(",")
        if parts[0] != "best" and parts[1] == lc and parts[2] == lg:
            return parts[0], 2.0 ** float(lc), None if lg == "" else 2.0 ** float(lg)
    raise TuningError("best line does not match any candidate")


def _score(objective, f, y):
    if objective == "auc":
        return roc_auc(f, y).auc
    return ca(confusion((f > 0).astype(int), y))


def _unit(args):
    """All C values for one (kernel, gamma, fold); the kernel matrix is built once."""
    X, y01, train, test, kspec, C_list, cfg, objective = args
    ytr = np.where(y01[train] == 1, 1.0, -1.0)
    if np.all(ytr == ytr[0]):
        raise TuningError("a training fold contains a single class")
    mean, sd = fit_scaler(X[train])
    Xtr = (X[train] - mean) / sd
    Xte = (X[test] - mean) / sd
    Ktr = kernel_matrix(kspec, Xtr)
    Kte = kernel_matrix(kspec, Xte, Xtr)
    out = []
    for C in C_list:
        c = TrainConfig(C=C, kkt_tol=cfg.kkt_tol, max_passes=cfg.max_passes, eps=cfg.eps)
        alpha, b, _, converged, _, _ = fit_precomputed(Ktr, ytr, c)
        sv = alpha > 0
        # same reduction as svm.decision_values so a retrain reproduces it bit for bit
        f = (Kte[:, sv] * (alpha * ytr)[sv][None, :]).sum(axis=1) + b
        out.append((_score(objective, f, y01[test]), converged))
    return out


def _evaluate(ds: Dataset, cands: list[Candidate], folds: FoldAssignment, cfg, objective,
              jobs) -> tuple[CandidateScore, ...]:
    if objective not in OBJECTIVES:
        raise TuningError(f"objective must be one of {OBJECTIVES}")
    if np.unique(ds.labels).size < 2:
        raise TuningError("dataset contains a single class")
    if folds.fold_of.shape[0] != len(ds):
        raise TuningError("fold assignment does not match the dataset")
    # group candidates sharing a kernel matrix, preserving first-appearance order
    groups: dict[tuple, list[int]] = {}
    for i, c in enumerate(cands):
        groups.setdefault((c.kernel, c.log2gamma), []).append(i)
    tasks, keys = [], []
    for key, idx in groups.items():
        kspec = cands[idx[0]].kernel_spec()
        for f in range(folds.K):
            tasks.append((ds.features, ds.labels, folds.train_indices(f), folds.test_indices(f),
                          kspec, [cands[i].C for i in idx], cfg, objective))
            keys.append((key, f))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_unit, tasks))
    else:
        results = [_unit(t) for t in tasks]
    scores = [[0.0] * folds.K for _ in cands]
    conv = [True] * len(cands)
    for (key, f), res in zip(keys, results):
        for i, (s, ok) in zip(groups[key], res):
            scores[i][f] = s
            conv[i] = conv[i] and ok
    return tuple(CandidateScore(c, tuple(s), ok) for c, s, ok in zip(cands, scores, conv))


def select_best(table) -> Candidate:
    """Highest mean score among converged candidates; ties go to smaller C, then smaller gamma."""
    ok = [s for s in table if s.converged]
    if not ok:
        lines = [f"  {s.candidate}: folds hit the iteration limit" for s in table]
        raise TuningError("no candidate converged:\n" + "\n".join(lines))

    def key(s):
        g = s.candidate.log2gamma
        return (-s.mean, s.candidate.log2C, -math.inf if g is None else g)

    # min() keeps the first of equal keys, i.e. candidate-definition order
    return min(ok, key=key).candidate


def _tune(ds, cands, K, seed, cfg, objective, jobs, meta):
    folds = kfold_split(len(ds), K, seed, ds.labels)
    table = _evaluate(ds, cands, folds, cfg, objective, jobs)
    return TuneResult(select_best(table), table, K, objective, meta)


def grid_search(ds: Dataset, space: SearchSpace = SearchSpace(), K: int = 5, seed: int = 0,
                cfg: TrainConfig = TrainConfig(), objective: str = "ca",
                jobs: int = 1) -> TuneResult:
    """K-fold CV of every grid candidate with fold-local standardization."""
    if K < 2:
        raise TuningError("K must be at least 2")
    return _tune(ds, space.candidates(), K, seed, cfg, objective, jobs,
                 {"search": "grid", "seed": seed})


def random_search(ds: Dataset, bounds=((-5.0, 15.0), (-15.0, 3.0)), n_draws: int = 50,
                  K: int = 5, seed: int = 0, kernel: str = "rbf",
                  cfg: TrainConfig = TrainConfig(), objective: str = "ca",
                  jobs: int = 1) -> TuneResult:
    """Log-uniform draws of (C, gamma) inside ``bounds`` (given as log2 ranges)."""
    if n_draws < 1:
        raise TuningError("n_draws must be >= 1")
    if K < 2:
        raise TuningError("K must be at least 2")
    (c_lo, c_hi), (g_lo, g_hi) = bounds
    if not (c_lo <= c_hi and g_lo <= g_hi):
        raise TuningError("empty search bounds")
    rng = np.random.default_rng(seed)
    uses_gamma = kernel_from_name(kernel).uses_gamma
    cands = []
    for _ in range(n_draws):
        lc = float(rng.uniform(c_lo, c_hi))
        lg = float(rng.uniform(g_lo, g_hi))
        cands.append(Candidate(kernel, lc, lg if uses_gamma else None))
    return _tune(ds, cands, K, seed, cfg, objective, jobs,
                 {"search": "random", "seed": seed, "n_draws": n_draws})
