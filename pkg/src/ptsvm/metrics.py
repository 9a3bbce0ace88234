"""Confusion counts, accuracy, ROC/AUC and cross-validated evaluation.

The positive class is 1 (unstable) throughout.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .scenario import Dataset, FoldAssignment
from .svm import KernelSpec, TrainConfig, decision_values, train_smo


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise MetricsError("negative count")

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


def confusion(pred, truth) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricsError("pred and truth differ in length")
    if pred.size == 0:
        raise MetricsError("empty input")
    for a in (pred, truth):
        if not np.all((a == 0) | (a == 1)):
            raise MetricsError("labels must be 0 or 1")
    p, t = pred == 1, truth == 1
    return ConfusionMatrix(int(np.sum(p & t)), int(np.sum(~p & ~t)),
                           int(np.sum(p & ~t)), int(np.sum(~p & t)))


def _require(m: ConfusionMatrix):
    if m.n == 0:
        raise MetricsError("empty confusion matrix")


def ca(m: ConfusionMatrix) -> float:
    _require(m)
    return (m.tp + m.tn) / m.n


def ce(m: ConfusionMatrix) -> float:
    # 1 - ca rather than (fp + fn) / n: the two can differ in the last bit,
    # and the complement keeps ca + ce == 1 exact
    _require(m)
    return 1.0 - ca(m)


def sensitivity(m: ConfusionMatrix) -> float:
    return m.tp / (m.tp + m.fn) if m.tp + m.fn else float("nan")


def specificity(m: ConfusionMatrix) -> float:
    return m.tn / (m.tn + m.fp) if m.tn + m.fp else float("nan")


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_csv(self) -> str:
        rows = ["fpr,tpr"]
        rows += [f"{format(a, '.17g')},{format(b, '.17g')}" for a, b in zip(self.fpr, self.tpr)]
        return "\n".join(rows) + "\n"


def roc_auc(scores, truth) -> RocCurve:
    """ROC from +inf down through each distinct score; tied scores form one step.

    The trapezoid sum is accumulated in integer counts, so the AUC equals
    the Mann-Whitney statistic up to one final division.
    """
    s = np.asarray(scores, dtype=float)
    t = np.asarray(truth)
    if s.shape != t.shape:
        raise MetricsError("scores and truth differ in length")
    if not np.all(np.isfinite(s)):
        raise MetricsError("scores must be finite")
    P = int(np.sum(t == 1))
    Nn = int(np.sum(t == 0))
    if P == 0 or Nn == 0:
        raise MetricsError("roc_auc needs both classes")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(t == 1)[last]
    fp = np.cumsum(t == 0)[last]
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    # twice the area in units of one (positive, negative) pair
    area2 = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = float(Fraction(area2, 2 * P * Nn))
    return RocCurve(fp / Nn, tp / P, np.r_[np.inf, s[last]], auc)


def mann_whitney(scores, truth) -> float:
    """P(score+ > score-) + P(tie)/2 by direct pair counting."""
    s = np.asarray(scores, dtype=float)
    t = np.asarray(truth)
    pos = s[t == 1]
    neg = s[t == 0]
    gt = np.sum(pos[:, None] > neg[None, :])
    eq = np.sum(pos[:, None] == neg[None, :])
    return float(Fraction(int(2 * gt + eq), 2 * pos.size * neg.size))


@dataclass(frozen=True)
class EvalReport:
    pooled: ConfusionMatrix
    fold_ca: tuple[float, ...]
    roc: RocCurve
    scores: np.ndarray
    kernel: KernelSpec
    C: float
    converged: tuple[bool, ...] = ()

    @property
    def ca(self) -> float:
        return ca(self.pooled)

    @property
    def ce(self) -> float:
        return ce(self.pooled)

    @property
    def auc(self) -> float:
        return self.roc.auc

    def to_text(self, header: dict | None = None) -> str:
        m = self.pooled
        pct = lambda v: f"{100.0 * v / m.n:.2f}%"  # noqa: E731
        lines = [f"{k}: {v}" for k, v in (header or {}).items()]
        k = self.kernel
        lines += [
            f"kernel: {k.name} gamma={k.gamma!r} C={self.C!r}",
            f"folds: {len(self.fold_ca)}",
            f"samples: {m.n}",
            f"TP: {m.tp} ({pct(m.tp)})",
            f"TN: {m.tn} ({pct(m.tn)})",
            f"FP: {m.fp} ({pct(m.fp)})",
            f"FN: {m.fn} ({pct(m.fn)})",
            f"CA: {self.ca!r}",
            f"CE: {self.ce!r}",
            f"sensitivity: {sensitivity(m)!r}",
            f"specificity: {specificity(m)!r}",
            f"AUC: {self.auc!r}",
            "fold CA: " + " ".join(repr(v) for v in self.fold_ca),
        ]
        if self.converged and not all(self.converged):
            bad = [i for i, c in enumerate(self.converged) if not c]
            lines.append(f"warning: folds {bad} hit the SMO iteration limit")
        return "\n".join(lines) + "\n"


def _fold_job(args):
    X, y, train, test, k, cfg, fold = args
    if np.all(y[train] == y[train][0]):
        raise MetricsError(f"fold {fold}: training rows contain a single class")
    m = train_smo(X[train], np.where(y[train] == 1, 1.0, -1.0), cfg, k)
    return decision_values(m, X[test]), m.converged


def cross_validate(ds: Dataset, k: KernelSpec, cfg: TrainConfig, folds: FoldAssignment,
                   jobs: int = 1) -> EvalReport:
    """K-fold train/test with fold-local standardization; ROC over pooled out-of-fold scores."""
    if folds.fold_of.shape[0] != len(ds):
        raise MetricsError("fold assignment does not match the dataset")
    X, y = ds.features, ds.labels
    tasks = [(X, y, folds.train_indices(f), folds.test_indices(f), k, cfg, f)
             for f in range(folds.K)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, folds.K)) as pool:
            results = list(pool.map(_fold_job, tasks))
    else:
        results = [_fold_job(t) for t in tasks]
    scores = np.empty(len(ds))
    pooled = ConfusionMatrix(0, 0, 0, 0)
    fold_ca = []
    for (_, _, _, test, *_), (f, conv) in zip(tasks, results):
        scores[test] = f
        cm = confusion((f > 0).astype(int), y[test])
        pooled = pooled + cm
        fold_ca.append(ca(cm))
    return EvalReport(pooled, tuple(fold_ca), roc_auc(scores, y), scores, k, cfg.C,
                      tuple(c for _, c in results))

