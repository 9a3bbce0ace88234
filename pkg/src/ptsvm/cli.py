"""Command-line pipeline: generate, tune, train, evaluate, predict and the sweeps.

Stages talk only through files. Every artifact gets a ``<file>.meta.json``
sidecar that names the fingerprint of its upstream artifact and the seed.
Exit codes: 0 success, 1 computation failure, 2 input or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import SimulationConfig, SimulationError
from .grid_model import GridModelError, Network, parse_cdf
from .metrics import MetricsError, cross_validate
from .powerflow import PowerFlowError
from .scenario import (FAULT_SEVERITY, FCT_MEAN, FCT_SD, LOAD_SD, GenerationError, Scenario,
                       evaluate_scenario, generate_dataset, kfold_split, load_buses,
                       read_dataset, write_dataset)
from .svm import (KernelSpec, SvmError, TrainConfig, decision_values, read_model, train_smo,
                  write_model)
from .tuning import (SearchSpace, TuningError, grid_search, kernel_from_name, parse_tune_csv,
                     random_search)

log = logging.getLogger("ptsvm")


class InputError(Exception):
    """Bad input file or configuration (exit code 2)."""


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {text!r}")


# key -> (converter, default). Flags override the config file, which overrides these.
SETTINGS = {
    "network": (str, None),
    "dynamics": (str, None),
    "seed": (int, 2024),
    "samples_per_line": (int, 500),
    "extended": (_bool, False),
    "t_end": (float, 10.0),
    "t_fault": (float, 1.0),
    "dt": (float, 0.005),
    "angle_ceiling": (float, 2000.0),
    "K": (int, 5),
    "kernel": (str, "rbf"),
    "C": (float, None),
    "gamma": (float, None),
    "log2C": (_floats, tuple(range(-5, 16, 2))),
    "log2gamma": (_floats, tuple(range(-15, 4, 2))),
    "search": (str, "grid"),
    "n_draws": (int, 50),
    "objective": (str, "ca"),
    "kkt_tol": (float, 1e-3),
    "max_passes": (int, 1_000_000),
    "kernels": (str, "linear,poly2,poly3,rbf"),
    "k_min": (int, 2),
    "k_max": (int, 10),
}


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    out = {}
    for n, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{p}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise InputError(f"{p}:{n}: unknown setting {key!r}")
        out[key] = value
    return out


def resolve(args) -> dict:
    cfg_file = read_config(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key, (conv, default) in SETTINGS.items():
        flag = getattr(args, key, None)
        try:
            if flag is not None:
                out[key] = conv(flag) if isinstance(flag, str) else flag
            elif key in cfg_file:
                out[key] = conv(cfg_file[key])
            else:
                out[key] = default
        except ValueError as exc:
            raise InputError(f"bad value for {key}: {exc}") from None
    for name in [out["kernel"], *out["kernels"].split(",")]:
        try:
            kernel_from_name(name.strip())
        except TuningError as exc:
            raise InputError(str(exc)) from None
    return out


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_meta(path, command: str, seed, upstream: dict, settings: dict, **extra) -> None:
    meta = {"command": command, "version": __version__, "seed": seed,
            "upstream": upstream, "settings": settings, **extra}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_network(s: dict) -> Network:
    if s["network"] is None:
        data = resources.files("ptsvm") / "data"
        cdf, dyn = (data / "ieee14.cdf").read_text(), (data / "ieee14.dyn").read_text()
    else:
        cdf_path = Path(s["network"])
        dyn_path = Path(s["dynamics"]) if s["dynamics"] else cdf_path.with_suffix(".dyn")
        if not cdf_path.is_file():
            raise InputError(f"network file not found: {cdf_path}")
        if not dyn_path.is_file():
            raise InputError(f"dynamics sidecar not found: {dyn_path}")
        cdf, dyn = cdf_path.read_text(), dyn_path.read_text()
    return parse_cdf(cdf, dyn)


def sim_config(s: dict) -> SimulationConfig:
    return SimulationConfig(t_end=s["t_end"], t_fault=s["t_fault"], dt=s["dt"],
                            angle_ceiling=s["angle_ceiling"])


def train_config(s: dict, C: float) -> TrainConfig:
    return TrainConfig(C=C, kkt_tol=s["kkt_tol"], max_passes=s["max_passes"])


def _dataset(path):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"dataset not found: {p}")
    try:
        ds = read_dataset(p)
    except ValueError as exc:
        raise InputError(f"{p}: {exc}") from None
    if np.unique(ds.labels).size < 2:
        raise InputError(f"{p}: dataset contains a single class")
    return ds


def _model(path):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"model file not found: {p}")
    try:
        return read_model(p.read_text())
    except SvmError as exc:
        raise InputError(f"{p}: {exc}") from None


def _hyper(args, s) -> tuple[KernelSpec, float, dict]:
    """Kernel and C from --model, --tune or the settings, in that order."""
    if getattr(args, "model", None):
        m, _ = _model(args.model)
        return m.kernel, m.C, {"model": sha256_file(args.model)}
    if getattr(args, "tune", None):
        p = Path(args.tune)
        if not p.is_file():
            raise InputError(f"tune report not found: {p}")
        try:
            name, C, gamma = parse_tune_csv(p.read_text())
        except (TuningError, IndexError, ValueError) as exc:
            raise InputError(f"{p}: {exc}") from None
        return kernel_from_name(name, gamma), C, {"tune": sha256_file(p)}
    if s["C"] is None:
        raise InputError("give --model, --tune or --C")
    if kernel_from_name(s["kernel"]).uses_gamma and s["gamma"] is None:
        raise InputError(f"kernel {s['kernel']} needs --gamma")
    return kernel_from_name(s["kernel"], s["gamma"]), s["C"], {}


def _public(s: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in s.items()}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args, s):
    net = load_network(s)
    ds = generate_dataset(net, s["samples_per_line"], s["seed"], sim_config(s),
                          extended=s["extended"], jobs=args.jobs)
    write_dataset(ds, args.out)
    n1 = int(ds.labels.sum())
    print(f"rows: {len(ds)}")
    print(f"unstable: {n1} ({100.0 * n1 / len(ds):.2f}%)")
    print(f"stable: {len(ds) - n1} ({100.0 * (len(ds) - n1) / len(ds):.2f}%)")
    print(f"power-flow resamples: {ds.resamples}")
    print(f"wrote {args.out}")


def cmd_tune(args, s):
    ds = _dataset(args.dataset)
    if s["search"] == "grid":
        space = SearchSpace(log2C=s["log2C"], log2gamma=s["log2gamma"], kernels=(s["kernel"],))
        res = grid_search(ds, space, s["K"], s["seed"], train_config(s, 1.0), s["objective"],
                          args.jobs)
    elif s["search"] == "random":
        c, g = s["log2C"], s["log2gamma"]
        res = random_search(ds, ((min(c), max(c)), (min(g), max(g))), s["n_draws"], s["K"],
                            s["seed"], s["kernel"], train_config(s, 1.0), s["objective"],
                            args.jobs)
    else:
        raise InputError(f"search must be grid or random, not {s['search']!r}")
    Path(args.out).write_text(res.to_csv())
    write_meta(args.out, "tune", s["seed"], {"dataset": sha256_file(args.dataset)}, _public(s))
    b = res.best_score
    print(f"candidates: {len(res.table)}")
    print(f"best: kernel={res.best.kernel} log2C={res.best.log2C} "
          f"log2gamma={res.best.log2gamma} mean_{res.objective}={b.mean!r} sd={b.sd!r}")
    print(f"wrote {args.out}")


def cmd_train(args, s):
    ds = _dataset(args.dataset)
    k, C, up = _hyper(args, s)
    y = np.where(ds.labels == 1, 1.0, -1.0)
    m = train_smo(ds.features, y, train_config(s, C), k)
    fp = sha256_file(args.dataset)
    meta = {"dataset": fp, "features": "|".join(ds.feature_names), "seed": s["seed"]}
    Path(args.out).write_text(write_model(m, meta))
    write_meta(args.out, "train", s["seed"], {"dataset": fp, **up}, _public(s),
               support_vectors=int(m.coeffs.size), converged=m.converged)
    train_err = int(np.sum((decision_values(m, ds.features) > 0).astype(int) != ds.labels))
    print(f"kernel: {k.name} gamma={k.gamma!r} C={C!r}")
    print(f"support vectors: {m.coeffs.size} of {len(ds)}")
    print(f"training errors: {train_err}")
    if not m.converged:
        print("warning: SMO hit the iteration limit; KKT conditions not met", file=sys.stderr)
    print(f"wrote {args.out}")


def cmd_evaluate(args, s):
    ds = _dataset(args.dataset)
    k, C, up = _hyper(args, s)
    folds = kfold_split(len(ds), s["K"], s["seed"], ds.labels)
    rep = cross_validate(ds, k, train_config(s, C), folds, jobs=args.jobs)
    header = {"dataset": sha256_file(args.dataset), **up, "seed": s["seed"]}
    Path(args.out).write_text(rep.to_text(header))
    write_meta(args.out, "evaluate", s["seed"], {"dataset": header["dataset"], **up},
               _public(s))
    if args.roc:
        Path(args.roc).write_text(rep.roc.to_csv())
        write_meta(args.roc, "evaluate", s["seed"],
                   {"dataset": header["dataset"], **up}, _public(s))
    sys.stdout.write(rep.to_text())


# sampled ranges: fct ~ N(0.9, 0.1), load multipliers ~ N(1, 0.1)
_FCT_RANGE = (FCT_MEAN - 4 * FCT_SD, FCT_MEAN + 4 * FCT_SD)
_LOAD_RANGE = (1 - 4 * LOAD_SD, 1 + 4 * LOAD_SD)


def cmd_predict(args, s):
    if args.fct <= 0:
        raise InputError("fct must be positive")
    if not 0.0 <= args.lam <= 1.0:
        raise InputError("lambda must lie in [0, 1]")
    if args.load <= 0:
        raise InputError("load must be positive")
    ftype = args.ftype.upper()
    if ftype not in FAULT_SEVERITY:
        raise InputError(f"fault type must be one of {sorted(FAULT_SEVERITY)}")
    m, meta = _model(args.model)
    net = load_network(s)
    lines = net.fault_lines
    if not 1 <= args.line <= len(lines):
        raise InputError(f"line must lie in 1..{len(lines)}")
    for name, v, (lo, hi) in (("fct", args.fct, _FCT_RANGE), ("load", args.load, _LOAD_RANGE)):
        if not lo <= v <= hi:
            print(f"warning: {name} = {v} lies outside the sampled range [{lo:.2f}, {hi:.2f}]; "
                  f"the prediction is an extrapolation", file=sys.stderr)
    sev = float(FAULT_SEVERITY[ftype])
    if m.n_features == 5:
        x = [args.load, sev, float(args.line), args.lam, args.fct]
    elif m.n_features == 4:
        x = [args.load, sev, (args.line - 1 + args.lam) / len(lines), args.fct]
    else:
        raise InputError(f"model expects {m.n_features} features")
    f = float(decision_values(m, np.array([x]))[0])
    pred = int(f > 0)
    print(f"prediction: {'unstable' if pred else 'stable'}")
    print(f"decision value: {f!r}")
    if args.verify:
        scen = Scenario(lines[args.line - 1], ftype, args.lam, args.fct,
                        (args.load,) * len(load_buses(net)))
        out = evaluate_scenario(net, scen, sim_config(s))
        print(f"simulated delta_max: {out.delta_max:.3f} deg, TSI: {out.tsi:.6f}")
        print(f"simulation: {'unstable' if out.label else 'stable'}")
        print(f"agreement: {'yes' if out.label == pred else 'no'}")


def cmd_sweep_k(args, s):
    ds = _dataset(args.dataset)
    k, C, up = _hyper(args, s)
    if not 2 <= s["k_min"] <= s["k_max"]:
        raise InputError("need 2 <= k_min <= k_max")
    rows = ["K,ca,auc"]
    for K in range(s["k_min"], s["k_max"] + 1):
        folds = kfold_split(len(ds), K, s["seed"], ds.labels)
        rep = cross_validate(ds, k, train_config(s, C), folds, jobs=args.jobs)
        rows.append(f"{K},{rep.ca!r},{rep.auc!r}")
        print(rows[-1], flush=True)
    Path(args.out).write_text("\n".join(rows) + "\n")
    write_meta(args.out, "sweep-k", s["seed"], {"dataset": sha256_file(args.dataset), **up},
               _public(s))


def cmd_sweep_kernel(args, s):
    ds = _dataset(args.dataset)
    rows = ["kernel,log2C,log2gamma,ca,auc"]
    for name in (n.strip() for n in s["kernels"].split(",") if n.strip()):
        space = SearchSpace(log2C=s["log2C"], log2gamma=s["log2gamma"], kernels=(name,))
        res = grid_search(ds, space, s["K"], s["seed"], train_config(s, 1.0), s["objective"],
                          args.jobs)
        b = res.best
        folds = kfold_split(len(ds), s["K"], s["seed"], ds.labels)
        rep = cross_validate(ds, b.kernel_spec(), train_config(s, b.C), folds, jobs=args.jobs)
        lg = "" if b.log2gamma is None else repr(b.log2gamma)
        rows.append(f"{name},{b.log2C!r},{lg},{rep.ca!r},{rep.auc!r}")
        print(rows[-1], flush=True)
    Path(args.out).write_text("\n".join(rows) + "\n")
    write_meta(args.out, "sweep-kernel", s["seed"], {"dataset": sha256_file(args.dataset)},
               _public(s))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p, *groups):
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--seed", type=int)
    if "net" in groups:
        p.add_argument("--network", help="IEEE CDF file (default: bundled 14-bus case)")
        p.add_argument("--dynamics", help="machine sidecar (default: network path with .dyn)")
        for name in ("t_end", "t_fault", "dt", "angle_ceiling"):
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    if "svm" in groups:
        p.add_argument("--dataset", required=True)
        p.add_argument("--kernel", help="linear, poly2, poly3, rbf or sigmoid")
        p.add_argument("--kkt-tol", dest="kkt_tol", type=float)
        p.add_argument("--max-passes", dest="max_passes", type=int)
        p.add_argument("-K", "--folds", dest="K", type=int)
    if "hyper" in groups:
        p.add_argument("--model", help="take kernel and C from a model file")
        p.add_argument("--tune", help="take kernel, C and gamma from a tune report")
        p.add_argument("--C", type=float)
        p.add_argument("--gamma", type=float)
    if "grid" in groups:
        p.add_argument("--log2C", help="comma-separated log2 C values")
        p.add_argument("--log2gamma", help="comma-separated log2 gamma values")
        p.add_argument("--objective", choices=("ca", "auc"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ptsvm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"ptsvm {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Monte Carlo dataset from time-domain simulation")
    _common(p, "net")
    p.add_argument("--samples-per-line", dest="samples_per_line", type=int)
    p.add_argument("--extended", action="store_const", const=True,
                   help="five features: line rank and position instead of one coordinate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("tune", help="cross-validated hyperparameter search")
    _common(p, "svm", "grid")
    p.add_argument("--search", choices=("grid", "random"))
    p.add_argument("--n-draws", dest="n_draws", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("train", help="train one model on the whole dataset")
    _common(p, "svm", "hyper")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="K-fold evaluation report and ROC points")
    _common(p, "svm", "hyper")
    p.add_argument("--out", required=True)
    p.add_argument("--roc", help="write ROC points CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify one scenario")
    _common(p, "net")
    p.add_argument("--model", required=True)
    p.add_argument("--load", type=float, required=True, help="uniform load multiplier")
    p.add_argument("--ftype", required=True, help="LG, LL, LLG or LLL")
    p.add_argument("--line", type=int, default=1, help="fault-eligible line rank (1-based)")
    p.add_argument("--lam", "--lambda", dest="lam", type=float, required=True,
                   help="fault position along the line in [0, 1]")
    p.add_argument("--fct", type=float, required=True, help="fault clearing time (s)")
    p.add_argument("--verify", action="store_true", help="also run the simulation")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep-k", help="CA and AUC against the number of folds")
    _common(p, "svm", "hyper")
    p.add_argument("--k-min", dest="k_min", type=int)
    p.add_argument("--k-max", dest="k_max", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("sweep-kernel", help="tuned CA per kernel")
    _common(p, "svm", "grid")
    p.add_argument("--kernels", help="comma-separated kernel names")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_kernel)
    return ap


_INPUT_ERRORS = (InputError, GridModelError, SvmError, MetricsError, FileNotFoundError,
                 ValueError)
_COMPUTE_ERRORS = (PowerFlowError, SimulationError, GenerationError, TuningError, RuntimeError,
                   AssertionError)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        s = resolve(args)
        if args.jobs < 1:
            raise InputError("--jobs must be >= 1")
        args.func(args, s)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _COMPUTE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
