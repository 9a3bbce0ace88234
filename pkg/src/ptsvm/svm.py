"""Binary soft-margin support vector machine.

The dual

    max  sum(a) - 1/2 sum_ij a_i a_j y_i y_j K(x_i, x_j)
    s.t. 0 <= a_i <= C,  sum(a_i y_i) = 0

is solved by SMO: each step picks the maximal violating index ``i`` and the
partner ``j`` with the largest second-order gain, scanning indices in order
(no randomization), and updates the pair analytically.

Labels passed to the trainer are -1/+1; +1 is the unstable class.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from numba import njit

KERNELS = ("linear", "polynomial", "sigmoid", "rbf")
AUDIT_ENV = "PTSVM_KKT_AUDIT"
# models audited in this process while AUDIT_ENV is set
audit_stats = {"audited": 0, "non_converged": 0, "violations": 0, "worst": 0.0}


class SvmError(ValueError):
    pass


class KKTViolation(AssertionError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float = 1.0
    degree: int = 3
    coef0: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise SvmError(f"unknown kernel {self.kind!r}")
        if self.kind in ("rbf", "sigmoid") and not self.gamma > 0:
            raise SvmError("gamma must be positive")
        if self.kind == "polynomial" and (int(self.degree) != self.degree or self.degree < 1):
            raise SvmError("polynomial degree must be an integer >= 1")

    @classmethod
    def linear(cls):
        return cls("linear", gamma=1.0, degree=1, coef0=0.0)

    @classmethod
    def rbf(cls, gamma: float):
        return cls("rbf", gamma=gamma)

    @classmethod
    def poly(cls, degree: int, coef0: float = 1.0):
        return cls("polynomial", gamma=1.0, degree=degree, coef0=coef0)

    @classmethod
    def sigmoid(cls, gamma: float, coef0: float = 0.0):
        return cls("sigmoid", gamma=gamma, coef0=coef0)

    @property
    def name(self) -> str:
        if self.kind == "polynomial":
            return f"poly{self.degree}"
        return self.kind

    @property
    def uses_gamma(self) -> bool:
        return self.kind in ("rbf", "sigmoid")


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    kkt_tol: float = 1e-3
    max_passes: int = 1_000_000
    eps: float = 1e-12

    def __post_init__(self):
        if not self.C > 0:
            raise SvmError("C must be positive")


@dataclass(frozen=True)
class SvmModel:
    support_vectors: np.ndarray
    coeffs: np.ndarray
    bias: float
    kernel: KernelSpec
    mean: np.ndarray
    sd: np.ndarray
    C: float
    converged: bool = True
    iterations: int = 0
    alpha: np.ndarray | None = field(default=None, repr=False, compare=False)
    train_decision: np.ndarray | None = field(default=None, repr=False, compare=False)
    objective_trace: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_features(self) -> int:
        return self.mean.size

    def scale(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise SvmError(f"expected {self.n_features} features, got {X.shape[1]}")
        return (X - self.mean) / self.sd


@dataclass(frozen=True)
class SrmDiagnostics:
    w_norm_sq: float
    margin: float
    ball_radius_sq: float
    h_bound: int
    risk_bound: float


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def kernel_eval(k: KernelSpec, a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise SvmError("kernel arguments differ in dimension")
    return float(kernel_matrix(k, a[None, :], b[None, :])[0, 0])


_KIND_CODE = {"linear": 0, "polynomial": 1, "sigmoid": 2, "rbf": 3}


@njit(cache=True)
def _kernel_block(A, B, code, gamma, degree, coef0, symmetric):
    # fixed per-feature summation order, single thread: bit-reproducible
    n, m, d = A.shape[0], B.shape[0], A.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        j0 = i if symmetric else 0
        for j in range(j0, m):
            acc = 0.0
            if code == 3:
                for c in range(d):
                    diff = A[i, c] - B[j, c]
                    acc += diff * diff
                v = np.exp(-gamma * acc)
            else:
                for c in range(d):
                    acc += A[i, c] * B[j, c]
                if code == 0:
                    v = acc
                elif code == 1:
                    v = (acc + coef0) ** degree
                else:
                    v = np.tanh(gamma * acc + coef0)
            out[i, j] = v
            if symmetric:
                out[j, i] = v
    return out


def kernel_matrix(k: KernelSpec, A, B=None) -> np.ndarray:
    """Gram matrix ``K[i, j] = k(A[i], B[j])``; ``B=None`` means ``B = A``."""
    A = np.ascontiguousarray(np.atleast_2d(np.asarray(A, dtype=float)))
    symmetric = B is None
    B = A if symmetric else np.ascontiguousarray(np.atleast_2d(np.asarray(B, dtype=float)))
    if A.shape[1] != B.shape[1]:
        raise SvmError("kernel arguments differ in dimension")
    return _kernel_block(A, B, _KIND_CODE[k.kind], float(k.gamma), int(k.degree),
                         float(k.coef0), symmetric)


# ---------------------------------------------------------------------------
# SMO
# ---------------------------------------------------------------------------

@njit(cache=True)
def _recompute_gradient(K, y, alpha, G):
    n = y.size
    for t in range(n):
        G[t] = -1.0
    for s in range(n):
        if alpha[s] != 0.0:
            ys = y[s] * alpha[s]
            for t in range(n):
                G[t] += y[t] * ys * K[s, t]


@njit(cache=True)
def _select(y, alpha, G, C):
    gmax = -np.inf
    gmin = np.inf
    i = -1
    for t in range(y.size):
        v = -y[t] * G[t]
        if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
            if v > gmax:
                gmax = v
                i = t
        if (y[t] < 0 and alpha[t] < C) or (y[t] > 0 and alpha[t] > 0):
            if v < gmin:
                gmin = v
    return i, gmax, gmin


@njit(cache=True)
def _smo(K, y, C, tol, max_iter, tau, debug, trace):
    n = y.size
    alpha = np.zeros(n)
    G = -np.ones(n)
    it = 0
    n_trace = 0
    refreshes = 0
    converged = False
    if debug:
        trace[0] = 0.0
        n_trace = 1
    while True:
        i, gmax, gmin = _select(y, alpha, G, C)
        if i < 0 or gmax - gmin < tol:
            # confirm on an exactly recomputed gradient
            _recompute_gradient(K, y, alpha, G)
            i, gmax, gmin = _select(y, alpha, G, C)
            refreshes += 1
            if i < 0 or gmax - gmin < tol or refreshes > 20:
                converged = i < 0 or gmax - gmin < tol
                break
        if it >= max_iter:
            break
        j = -1
        best = np.inf
        Kii = K[i, i]
        for t in range(n):
            if (y[t] < 0 and alpha[t] < C) or (y[t] > 0 and alpha[t] > 0):
                b = gmax + y[t] * G[t]
                if b > 0.0:
                    a = Kii + K[t, t] - 2.0 * K[i, t]
                    if a <= 0.0:
                        a = tau
                    val = -(b * b) / a
                    if val < best:
                        best = val
                        j = t
        if j < 0:
            break
        ai_old = alpha[i]
        aj_old = alpha[j]
        quad = Kii + K[j, j] - 2.0 * K[i, j]
        if quad <= 0.0:
            quad = tau
        if y[i] != y[j]:
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            delta = (G[i] - G[j]) / quad
            s = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if s > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = s - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = s
            if s > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = s - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = s
        dai = (alpha[i] - ai_old) * y[i]
        daj = (alpha[j] - aj_old) * y[j]
        for t in range(n):
            G[t] += y[t] * (K[i, t] * dai + K[j, t] * daj)
        it += 1
        if debug and n_trace < trace.size:
            obj = 0.0
            for t in range(n):
                obj += 0.5 * alpha[t] - 0.5 * alpha[t] * G[t]
            trace[n_trace] = obj
            n_trace += 1
    return alpha, G, it, converged, n_trace


def _bias(alpha, y, G, C):
    v = -y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(v[free].mean())
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
    lo = v[up].max() if up.any() else -np.inf
    hi = v[low].min() if low.any() else np.inf
    if not np.isfinite(lo):
        return float(hi)
    if not np.isfinite(hi):
        return float(lo)
    return 0.5 * (lo + hi)


def kkt_violation(alpha, y, f, C) -> float:
    """Largest KKT violation of ``y f`` measured against the bound state of ``alpha``."""
    yf = y * f
    at_zero = alpha <= 0
    at_c = alpha >= C
    free = ~(at_zero | at_c)
    worst = 0.0
    if at_zero.any():
        worst = max(worst, float(np.max(1.0 - yf[at_zero])))
    if at_c.any():
        worst = max(worst, float(np.max(yf[at_c] - 1.0)))
    if free.any():
        worst = max(worst, float(np.max(np.abs(yf[free] - 1.0))))
    return worst


def fit_precomputed(K: np.ndarray, y: np.ndarray, cfg: TrainConfig, debug: bool = False):
    """SMO on a precomputed kernel matrix.

    Returns ``(alpha, bias, decision_values, converged, iterations, trace)``.
    """
    y = np.asarray(y, dtype=float)
    K = np.ascontiguousarray(K, dtype=float)
    trace = np.zeros(cfg.max_passes + 1 if debug else 1)
    alpha, G, it, converged, n_trace = _smo(K, y, float(cfg.C), float(cfg.kkt_tol),
                                            int(cfg.max_passes), float(cfg.eps), debug, trace)
    b = _bias(alpha, y, G, cfg.C)
    f = y * (G + 1.0) + b
    if os.environ.get(AUDIT_ENV):
        _audit(K, alpha, y, b, cfg, converged)
    return alpha, b, f, bool(converged), int(it), trace[:n_trace] if debug else None


def _audit(K, alpha, y, b, cfg, converged):
    if not converged:
        audit_stats["non_converged"] += 1
        return
    # decision values rebuilt from scratch, independent of the SMO gradient cache
    coef = alpha * y
    f = (K * coef[None, :]).sum(axis=1) + b
    worst = kkt_violation(alpha, y, f, cfg.C)
    audit_stats["audited"] += 1
    audit_stats["worst"] = max(audit_stats["worst"], worst)
    if worst > cfg.kkt_tol:
        audit_stats["violations"] += 1
        raise KKTViolation(f"KKT violation {worst:.3e} exceeds tolerance {cfg.kkt_tol:.1e}")
    if abs(float(np.sum(coef))) > 1e-9 * max(1.0, cfg.C):
        audit_stats["violations"] += 1
        raise KKTViolation("dual equality constraint violated")


def fit_scaler(X, standardize: bool = True):
    X = np.asarray(X, dtype=float)
    if not standardize:
        return np.zeros(X.shape[1]), np.ones(X.shape[1])
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return mean, sd


def _check_labels(y):
    y = np.asarray(y, dtype=float)
    if not np.all((y == 1) | (y == -1)):
        raise SvmError("labels must be -1 or +1")
    if y.size < 2 or np.all(y == y[0]):
        raise SvmError("training data must contain both classes")
    return y


def _make_model(Xs, y, alpha, b, f, k, mean, sd, cfg, converged, it, trace):
    sv = alpha > 0
    return SvmModel(
        support_vectors=Xs[sv].copy(), coeffs=(alpha * y)[sv], bias=float(b), kernel=k,
        mean=mean, sd=sd, C=cfg.C, converged=converged, iterations=it,
        alpha=alpha, train_decision=f, objective_trace=trace,
    )


def train_smo(X, y, cfg: TrainConfig = TrainConfig(), k: KernelSpec = KernelSpec(),
              standardize: bool = True, debug: bool = False) -> SvmModel:
    """Train on raw features; z-score statistics are fitted here and kept in the model.

    ``debug`` records the dual objective after every pair update. A model
    that exhausts ``cfg.max_passes`` is returned with ``converged=False``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = _check_labels(y)
    if X.shape[0] != y.size:
        raise SvmError("X and y differ in length")
    mean, sd = fit_scaler(X, standardize)
    Xs = (X - mean) / sd
    K = kernel_matrix(k, Xs)
    alpha, b, f, converged, it, trace = fit_precomputed(K, y, cfg, debug)
    return _make_model(Xs, y, alpha, b, f, k, mean, sd, cfg, converged, it, trace)


def decision_values(m: SvmModel, X) -> np.ndarray:
    Xs = m.scale(X)
    if m.support_vectors.shape[0] == 0:
        return np.full(Xs.shape[0], m.bias)
    Kx = kernel_matrix(m.kernel, Xs, m.support_vectors)
    return (Kx * m.coeffs[None, :]).sum(axis=1) + m.bias


def decision_value(m: SvmModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise SvmError("decision_value expects a single feature row")
    return float(decision_values(m, x[None, :])[0])


def predict(m: SvmModel, X) -> np.ndarray | int:
    """1 (unstable) where the decision value is strictly positive, else 0."""
    X = np.asarray(X, dtype=float)
    out = (decision_values(m, np.atleast_2d(X)) > 0).astype(int)
    return int(out[0]) if X.ndim == 1 else out


def dual_objective(alpha, y, K) -> float:
    coef = alpha * y
    return float(alpha.sum() - 0.5 * coef @ K @ coef)


def kkt_audit(m: SvmModel, X, y, tol: float | None = None) -> float:
    """Worst KKT violation of a freshly trained model on its training data."""
    if m.alpha is None:
        raise SvmError("model carries no training multipliers")
    f = decision_values(m, X)
    worst = kkt_violation(m.alpha, np.asarray(y, dtype=float), f, m.C)
    if tol is not None and worst > tol:
        raise KKTViolation(f"KKT violation {worst:.3e} exceeds {tol:.1e}")
    return worst


# ---------------------------------------------------------------------------
# capacity diagnostics
# ---------------------------------------------------------------------------

def risk_bound(t: int, N: int, h: float, eta: float) -> float:
    """Training error rate plus the VC confidence term, valid with probability 1 - eta."""
    if not 0 < eta < 1:
        raise SvmError("eta must lie in (0, 1)")
    return t / N + math.sqrt((h * (math.log(2 * N / h) + 1) - math.log(eta / 4)) / N)


def srm_diagnostics(m: SvmModel, t: int, N: int, eta: float, X=None) -> SrmDiagnostics:
    """Margin, enclosing-ball estimate and VC-dimension risk bound of a model.

    The ball radius is the kernel-centroid estimate over ``X`` (raw rows),
    defaulting to the support vectors.
    """
    S = m.support_vectors if X is None else m.scale(X)
    Ksv = kernel_matrix(m.kernel, m.support_vectors)
    w_sq = float(m.coeffs @ Ksv @ m.coeffs)
    if w_sq <= 0:
        raise SvmError("degenerate model: ||w|| = 0, margin undefined")
    Ks = kernel_matrix(m.kernel, S)
    n = S.shape[0]
    d2 = float(np.max(np.diag(Ks) - 2.0 / n * Ks.sum(axis=1) + Ks.sum() / n ** 2))
    # the origin-centred ball of radius max K(x,x) also encloses every point
    d2 = min(d2, float(np.max(np.diag(Ks))))
    cap = d2 * w_sq
    if m.kernel.kind == "linear":
        cap = min(m.n_features, cap)
    # absorb rounding so an exact integer capacity is not floored below itself
    h = int(math.floor(cap + 1e-9)) + 1
    return SrmDiagnostics(w_sq, 2.0 / math.sqrt(w_sq), d2, h, risk_bound(t, N, h, eta))


# ---------------------------------------------------------------------------
# reference solver (test oracle)
# ---------------------------------------------------------------------------

def _project(v, y, C):
    """Euclidean projection onto {0 <= a <= C, y.a = 0} by breakpoint search."""
    def g(mu):
        return (y * np.clip(v - mu * y, 0.0, C)).sum(axis=-1)

    bps = np.unique(np.concatenate([y * v, y * (v - C)]))
    vals = g(bps[:, None]) if bps.size else np.array([])
    # g is non-increasing in mu
    k = np.searchsorted(-vals, 0.0)
    if k < bps.size and vals[k] == 0.0:
        mu = bps[k]
    elif k == 0:
        mu = bps[0]
    elif k == bps.size:
        mu = bps[-1]
    else:
        m0, m1, g0, g1 = bps[k - 1], bps[k], vals[k - 1], vals[k]
        mu = m0 + (m1 - m0) * g0 / (g0 - g1)
    return np.clip(v - mu * y, 0.0, C)


def train_reference_qp(X, y, cfg: TrainConfig = TrainConfig(), k: KernelSpec = KernelSpec(),
                       standardize: bool = True, tol: float = 1e-10,
                       max_iter: int = 200_000) -> SvmModel:
    """Accelerated projected-gradient solve of the same dual (small N only)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = _check_labels(y)
    if y.size > 50:
        raise SvmError("reference solver is limited to N <= 50")
    mean, sd = fit_scaler(X, standardize)
    Xs = (X - mean) / sd
    K = kernel_matrix(k, Xs)
    Q = (y[:, None] * y[None, :]) * K
    L = max(float(np.linalg.eigvalsh(Q).max()), 1e-12)
    C = cfg.C
    a = np.zeros(y.size)
    z = a.copy()
    tk = 1.0
    converged = False
    for it in range(max_iter):
        a_new = _project(z - (Q @ z - 1.0) / L, y, C)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        # adaptive restart when momentum points uphill
        if (a_new - a) @ (Q @ a_new - 1.0) > 0:
            z, tk = a_new.copy(), 1.0
        else:
            z = a_new + (tk - 1.0) / t_new * (a_new - a)
            tk = t_new
        a = a_new
        if it % 10 == 0:
            step = a - _project(a - (Q @ a - 1.0) / L, y, C)
            if L * np.max(np.abs(step)) <= tol:
                converged = True
                break
    if not converged:
        raise SvmError("reference solver did not converge")
    G = Q @ a - 1.0
    b = _bias(a, y, G, C)
    f = y * (G + 1.0) + b
    return _make_model(Xs, y, a, b, f, k, mean, sd, cfg, True, it, None)


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------

MODEL_MAGIC = "ptsvm-model"
MODEL_VERSION = 1


def _g(v) -> str:
    return format(float(v), ".17g")


def write_model(m: SvmModel, meta: dict | None = None) -> str:
    k = m.kernel
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        f"kernel={k.kind} gamma={_g(k.gamma)} degree={int(k.degree)} coef0={_g(k.coef0)}",
        f"C={_g(m.C)}",
        f"d={m.n_features}",
        "mean=" + ",".join(_g(v) for v in m.mean),
        "sd=" + ",".join(_g(v) for v in m.sd),
        f"converged={int(m.converged)}",
    ]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta.{key}={value}")
    lines.append(f"nsv={m.coeffs.size}")
    for c, row in zip(m.coeffs, m.support_vectors):
        lines.append(",".join([_g(c)] + [_g(v) for v in row]))
    lines.append(f"b={_g(m.bias)}")
    return "\n".join(lines) + "\n"


def read_model(text: str) -> tuple[SvmModel, dict]:
    """Parse a model file; returns the model and its ``meta.*`` entries."""
    lines = text.splitlines()
    if not lines or lines[0].split() != [MODEL_MAGIC, str(MODEL_VERSION)]:
        raise SvmError("not a ptsvm model file (bad header)")
    try:
        kv = dict(tok.split("=", 1) for tok in lines[1].split())
        k = KernelSpec(kv["kernel"], float(kv["gamma"]), int(kv["degree"]), float(kv["coef0"]))
        pos = 2
        head, meta = {}, {}
        while not lines[pos].startswith("nsv="):
            key, value = lines[pos].split("=", 1)
            if key.startswith("meta."):
                meta[key[5:]] = value
            else:
                head[key] = value
            pos += 1
        nsv = int(lines[pos].split("=", 1)[1])
        d = int(head["d"])
        rows = [list(map(float, ln.split(","))) for ln in lines[pos + 1:pos + 1 + nsv]]
        if any(len(r) != d + 1 for r in rows):
            raise SvmError("support vector row has the wrong width")
        tail = lines[pos + 1 + nsv]
        if not tail.startswith("b="):
            raise SvmError("missing bias line")
        arr = np.array(rows, dtype=float).reshape(nsv, d + 1)
        model = SvmModel(
            support_vectors=arr[:, 1:], coeffs=arr[:, 0], bias=float(tail[2:]), kernel=k,
            mean=np.array([float(v) for v in head["mean"].split(",")]),
            sd=np.array([float(v) for v in head["sd"].split(",")]),
            C=float(head["C"]), converged=head.get("converged", "1") == "1",
        )
    except (KeyError, IndexError, ValueError) as exc:
        if isinstance(exc, SvmError):
            raise
        raise SvmError(f"malformed model file: {exc}") from None
    return model, meta
