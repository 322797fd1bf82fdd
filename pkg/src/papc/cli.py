"""Command-line entry point: ``papc gen | train | eval | apg | bench``."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from . import se as se_core
from .config import ModelHyper, Preset, ScenarioConfig, apply_overrides, config_snapshot, get_preset, load_config
from .errors import ConfigError, DataError, PapcError
from .nn import PROJECTIONS, Model
from .optim import ApgConfig, apg_solve, projected_gradient_residual
from .scenario import Dataset, generate_dataset
from .serialization import read_dataset, write_dataset
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger("papc")

SPLITS = {"train": 0, "test": 1, "val": 2}
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")
_SCEN_SKIP = {"seed"}
_HYPER_SKIP = {"M", "K_max"}


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


class RunManifest:
    """Records what a command did so it can be re-run and its outputs checked."""

    def __init__(self, command: str, argv: list[str]):
        self.data = {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "git": git_describe(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "kernel_backend": kernels.BACKEND,
            "config": {},
            "seeds": {},
            "timings_s": {},
            "artifacts": [],
        }
        self._t = {}

    def start(self, phase: str) -> None:
        self._t[phase] = time.perf_counter()

    def stop(self, phase: str) -> None:
        self.data["timings_s"][phase] = time.perf_counter() - self._t.pop(phase)

    def artifact(self, path: str | Path) -> None:
        self.data["artifacts"].append({"path": str(path), "sha256": sha256(path)})

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------- arguments

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_args(p: argparse.ArgumentParser, model: bool = False) -> None:
    g = p.add_argument_group("scenario")
    g.add_argument("--preset", default=None, help="named preset (default scenario0)")
    g.add_argument("--config", default=None, help="key = value config file with [scenario]/[model]/[train]")
    g.add_argument("--seed", dest="scen_seed", default=None, help="scenario seed (BS placement and samples)")
    for f in dataclasses.fields(ScenarioConfig):
        if f.name not in _SCEN_SKIP:
            g.add_argument(_flag(f.name), dest=f"scen__{f.name}", default=None, metavar="V")
    if model:
        g = p.add_argument_group("model")
        for f in dataclasses.fields(ModelHyper):
            if f.name not in _HYPER_SKIP:
                g.add_argument(_flag(f.name), dest=f"hyper__{f.name}", default=None, metavar="V")


def _collect(args, prefix: str) -> dict[str, str]:
    return {k[len(prefix):]: v for k, v in vars(args).items() if k.startswith(prefix) and v is not None}


def resolve_config(args) -> tuple[Preset, dict[str, str]]:
    base = get_preset(args.preset) if args.preset else None
    if args.config:
        preset, train_kv = load_config(args.config, base)
    else:
        preset, train_kv = base or get_preset("scenario0"), {}
    scen_kv = _collect(args, "scen__")
    if args.scen_seed is not None:
        scen_kv["seed"] = args.scen_seed
    scen = apply_overrides(preset.scenario, scen_kv)
    hyper = preset.hyper.replace(M=scen.M, K_max=scen.K_max) if (scen.M, scen.K_max) != (
        preset.hyper.M, preset.hyper.K_max) else preset.hyper
    hyper = apply_overrides(hyper, _collect(args, "hyper__"))
    return Preset(scen, hyper, preset.description), train_kv


def _load_dataset(path: str) -> Dataset:
    try:
        return read_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc


def _check_against(ds: Dataset, scen: ScenarioConfig) -> None:
    if (ds.M, ds.K_max, ds.tau_p) != (scen.M, scen.K_max, scen.tau_p):
        raise DataError(
            f"dataset has M={ds.M}, K_max={ds.K_max}, tau_p={ds.tau_p}; "
            f"scenario expects M={scen.M}, K_max={scen.K_max}, tau_p={scen.tau_p}"
        )


def _manifest_path(args, default_from: str) -> Path:
    return Path(args.manifest) if args.manifest else Path(str(default_from) + ".manifest.json")


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    preset, _ = resolve_config(args)
    scen = preset.scenario
    man = RunManifest("gen", args.argv)
    man.data["config"] = config_snapshot(scen)
    man.data["seeds"] = {"scenario": scen.seed, "split": SPLITS[args.split], "start": args.start}
    if args.P < 0:
        raise ConfigError("P must be >= 0")
    man.start("generate")
    ds = generate_dataset(scen, args.P, SPLITS[args.split], args.start, args.pad)
    man.stop("generate")
    man.start("write")
    write_dataset(args.out, ds)
    man.stop("write")
    man.artifact(args.out)
    man.write(_manifest_path(args, args.out))
    print(f"M={ds.M} K_max={ds.K_max} P={ds.P} tau_p={ds.tau_p} contamination={ds.contamination_fraction():.4f}")
    return 0


def _train_config(args, train_kv: dict[str, str], scen: ScenarioConfig) -> TrainConfig:
    cfg = TrainConfig(K_min=scen.K_min, K_max=scen.K_max, varying_k=scen.K_min is not None)
    cfg = apply_overrides(cfg, train_kv)
    cli = {
        "epochs": args.epochs, "batch_size": args.batch_size, "model": args.model, "seed": args.train_seed,
        "n_warmup": args.n_warmup, "projection": args.projection, "val_fraction": args.val_fraction,
        "checkpoint_every": args.checkpoint_every, "K_min": args.train_k_min, "K_max": args.train_k_max,
    }
    cfg = apply_overrides(cfg, {k: str(v) for k, v in cli.items() if v is not None})
    if args.varying_k is not None:
        cfg = dataclasses.replace(cfg, varying_k=args.varying_k)
    if args.select_best:
        cfg = dataclasses.replace(cfg, select_best=True)
    return dataclasses.replace(cfg, dataset=args.dataset, checkpoint_path=args.out)


def cmd_train(args) -> int:
    preset, train_kv = resolve_config(args)
    scen, hyper = preset.scenario, preset.hyper
    cfg = _train_config(args, train_kv, scen)
    man = RunManifest("train", args.argv)
    man.data["config"] = config_snapshot(scen, hyper, cfg)
    man.data["seeds"] = {"scenario": scen.seed, "train": cfg.seed}
    man.start("load")
    ds = _load_dataset(args.dataset)
    _check_against(ds, scen)
    man.stop("load")
    man.start("train")
    res = train(cfg, scen, hyper, ds, log_every=args.log_every)
    man.stop("train")
    res.model.save(args.out)
    man.artifact(args.out)
    if args.log:
        res.write_log(args.log)
        man.artifact(args.log)
    man.data["result"] = {
        "epoch_utility": res.epoch_utility, "val_utility": res.val_utility,
        "best_epoch": res.best_epoch, "n_params": res.model.n_params(),
    }
    man.write(_manifest_path(args, args.out))
    print(f"trained {res.model.kind} ({res.model.n_params()} parameters) in {res.seconds:.1f} s; "
          f"final train utility {res.epoch_utility[-1]:.4f}")
    return 0


def _apg_config(args) -> ApgConfig:
    return ApgConfig(max_iters=args.max_iters, tol=args.tol, patience=args.patience, restart=not args.no_restart)


def cmd_eval(args) -> int:
    preset, _ = resolve_config(args)
    scen = preset.scenario
    man = RunManifest("eval", args.argv)
    man.data["config"] = config_snapshot(scen)
    ds = _load_dataset(args.dataset)
    _check_against(ds, scen)
    if args.policy in ("epa", "apg"):
        policy = args.policy
    else:
        policy = Model.load(args.policy)
        man.data["checkpoint_sha256"] = sha256(args.policy)
    man.start("evaluate")
    res = evaluate(policy, ds, scen, _apg_config(args))
    man.stop("evaluate")
    summary = {"policy": args.policy if isinstance(policy, str) else policy.kind, **res.summary()}
    if args.out:
        res.write_se(args.out)
        man.artifact(args.out)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.summary:
        Path(args.summary).write_text(text + "\n")
        man.artifact(args.summary)
    man.data["summary"] = summary
    if args.out or args.summary or args.manifest:
        man.write(_manifest_path(args, args.out or args.summary or "eval"))
    print(text)
    return 0


def cmd_apg(args) -> int:
    preset, _ = resolve_config(args)
    scen = preset.scenario
    ds = _load_dataset(args.dataset)
    _check_against(ds, scen)
    if not 0 <= args.index < ds.P:
        raise DataError(f"sample index {args.index} out of range for P={ds.P}")
    s = ds.sample(args.index)
    phi = s.phi()
    t0 = time.perf_counter()
    res = apg_solve(s.beta, phi, scen, _apg_config(args))
    seconds = time.perf_counter() - t0
    epa = se_core.Evaluator(s.beta, phi, scen).utility(se_core.epa(ds.M, ds.K_max, scen.N, s.K_active))
    out = {
        "index": args.index, "K_active": s.K_active, "utility": res.utility, "epa_utility": float(epa),
        "iters": res.iters, "seconds": seconds,
        "residual": projected_gradient_residual(s.beta, phi, res.Mu, scen),
    }
    if args.trace:
        res.write_trace(args.trace)
        man = RunManifest("apg", args.argv)
        man.data["config"] = config_snapshot(scen, _apg_config(args))
        man.data["result"] = out
        man.artifact(args.trace)
        man.write(_manifest_path(args, args.trace))
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _median_time(fn, items, repetitions: int) -> tuple[float, list[float]]:
    """Median over repetitions of the mean per-item wall time."""
    per_rep = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for it in items:
            fn(it)
        per_rep.append((time.perf_counter() - t0) / len(items))
    return float(np.median(per_rep)), per_rep


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def bench_report(model: Model, ds: Dataset, scen: ScenarioConfig, repetitions: int, n_samples: int,
                 apg_cfg: ApgConfig | None = None, scaling_K=(10, 20, 40), scaling_preset: str = "scenario2",
                 scaling_samples: int = 20) -> dict:
    n = min(n_samples, ds.P)
    if n < 1:
        raise DataError("benchmark needs at least one sample")
    samples = [ds.sample(i) for i in range(n)]
    items = [(s.beta, s.phi(), s.K_active) for s in samples]
    N = scen.N
    timings = {}
    spreads = {}
    timings["epa"], spreads["epa"] = _median_time(lambda it: se_core.epa(ds.M, ds.K_max, N, it[2]), items, repetitions)
    timings["papc"], spreads["papc"] = _median_time(lambda it: model.predict(it[0], it[1], N), items, repetitions)
    timings["apg"], spreads["apg"] = _median_time(lambda it: apg_solve(it[0], it[1], scen, apg_cfg), items, repetitions)
    report = {
        "samples": n,
        "repetitions": repetitions,
        "median_seconds_per_sample": timings,
        "per_repetition": spreads,
        "ordering_ok": bool(timings["epa"] < timings["papc"] < timings["apg"]),
        "speedup_apg_over_papc": timings["apg"] / timings["papc"],
        "variance_reliable": repetitions > 1,
        "threads": {v: os.environ.get(v) for v in THREAD_VARS},
    }
    if repetitions == 1:
        report["warning"] = "repetitions=1: timing spread cannot be estimated; medians are single measurements"
    if scaling_K:
        base = get_preset(scaling_preset)
        ts = []
        for K in scaling_K:
            sc = base.scenario.replace(K_max=K, K_min=None)
            h = base.hyper.replace(K_max=K)
            m = Model.create("papc", h, seed=0)
            sd = generate_dataset(sc, scaling_samples, split=SPLITS["test"])
            its = [(sd.beta[i], sd.phi()[i]) for i in range(sd.P)]
            m.predict(its[0][0], its[0][1], sc.N)  # warm-up
            t, _ = _median_time(lambda it, m=m, N=sc.N: m.predict(it[0], it[1], N), its, max(repetitions, 3))
            ts.append(t)
        slope, intercept, r2 = linear_fit(scaling_K, ts)
        report["K_scaling"] = {
            "preset": scaling_preset, "M": base.scenario.M, "K": list(scaling_K), "seconds": ts,
            "slope_s_per_user": slope, "intercept_s": intercept, "r2": r2,
        }
    return report


def _single_threaded_env() -> dict[str, str]:
    env = dict(os.environ)
    for v in THREAD_VARS:
        env[v] = "1"
    env["PAPC_BENCH_CHILD"] = "1"
    return env


def cmd_bench(args) -> int:
    if os.environ.get("PAPC_BENCH_CHILD") != "1" and any(os.environ.get(v) != "1" for v in THREAD_VARS):
        # BLAS thread pools are fixed at import time, so re-run in a pinned child process
        return subprocess.call([sys.executable, "-m", "papc.cli", *args.argv], env=_single_threaded_env())
    preset, _ = resolve_config(args)
    scen = preset.scenario
    if args.repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    ds = _load_dataset(args.dataset)
    _check_against(ds, scen)
    model = Model.load(args.checkpoint)
    man = RunManifest("bench", args.argv)
    man.data["config"] = config_snapshot(scen, _apg_config(args))
    man.start("bench")
    ks = tuple(int(k) for k in args.scaling_k.split(",")) if args.scaling_k else ()
    report = bench_report(model, ds, scen, args.repetitions, args.samples, _apg_config(args), ks, args.scaling_preset)
    man.stop("bench")
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        man.artifact(args.out)
        man.data["report"] = report
        man.write(_manifest_path(args, args.out))
    print(text)
    return 0 if report["ordering_ok"] else 1


# ---------------------------------------------------------------- parser

def _add_apg_args(p) -> None:
    g = p.add_argument_group("apg")
    d = ApgConfig()
    g.add_argument("--max-iters", type=int, default=d.max_iters)
    g.add_argument("--tol", type=float, default=d.tol)
    g.add_argument("--patience", type=int, default=d.patience)
    g.add_argument("--no-restart", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="papc", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", help="generate a dataset file")
    _add_config_args(p)
    p.add_argument("--P", type=int, required=True, help="number of samples")
    p.add_argument("--split", choices=sorted(SPLITS), default="train")
    p.add_argument("--start", type=int, default=0, help="first sample index")
    p.add_argument("--pad", type=float, default=6e-13, help="fading value for padded users")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train PAPC or the FCN baseline")
    _add_config_args(p, model=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="metrics CSV")
    p.add_argument("--model", choices=("papc", "fcn"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--train-seed", type=int, default=None)
    p.add_argument("--n-warmup", type=int, default=None)
    p.add_argument("--projection", choices=PROJECTIONS, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--varying-k", dest="varying_k", action="store_true", default=None)
    p.add_argument("--fixed-k", dest="varying_k", action="store_false")
    p.add_argument("--train-k-min", type=int, default=None)
    p.add_argument("--train-k-max", type=int, default=None)
    p.add_argument("--select-best", action="store_true")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, 'epa' or 'apg' on a dataset")
    _add_config_args(p)
    p.add_argument("policy", help="checkpoint path, 'epa' or 'apg'")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None, help="per-user SE CSV")
    p.add_argument("--summary", default=None, help="summary JSON")
    p.add_argument("--manifest", default=None)
    _add_apg_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("apg", help="solve one sample with APG and export its trace")
    _add_config_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--trace", default=None, help="utility trace CSV")
    p.add_argument("--manifest", default=None)
    _add_apg_args(p)
    p.set_defaults(func=cmd_apg)

    p = sub.add_parser("bench", help="single-threaded per-sample run time of EPA, PAPC and APG")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--scaling-k", default="10,20,40", help="comma-separated K values, empty to skip")
    p.add_argument("--scaling-preset", default="scenario2")
    p.add_argument("--out", default=None, help="report JSON")
    p.add_argument("--manifest", default=None)
    _add_apg_args(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except PapcError as exc:
        print(f"papc {args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"papc {args.verb}: ConfigError: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
