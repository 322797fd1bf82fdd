"""Compiled vs numpy kernels: per-call time at two problem sizes.

    python3 benchmarks/bench_kernels.py [--repeat 7] [--json out.json]

Run with OMP_NUM_THREADS=1 for single-threaded numbers.
"""
import argparse
import json
import math
import sys
import timeit

import numpy as np

from papc import kernels
from papc.config import get_preset
from papc.optim import Problem
from papc.scenario import generate_dataset


def cases(prob, Mu, cfg):
    a = (prob.B, prob.S, prob.W, Mu, prob.active, cfg.zeta_d, cfg.N, cfg.prelog, cfg.lambda_smooth)
    X = np.random.default_rng(0).normal(size=Mu.shape)
    r = 1.0 / math.sqrt(cfg.N)
    return {
        "sinr": lambda k: k.sinr(prob.B, prob.S, prob.W, Mu, cfg.zeta_d, cfg.N),
        "utility": lambda k: k.utility(*a),
        "utility_grad": lambda k: k.utility_grad(*a),
        "project_rows": lambda k: k.project_rows(X, r),
    }


def time_call(fn, repeat):
    t = timeit.Timer(fn)
    n, _ = t.autorange()
    return min(t.repeat(repeat, n)) / n


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--presets", default="scenario0,scenario2")
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if not kernels.compiled_available():
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    backends = {name: kernels.backend_module(name) for name in ("python", "compiled")}
    rows = []
    for preset in args.presets.split(","):
        cfg = get_preset(preset).scenario
        ds = generate_dataset(cfg, 1, split=1)
        prob = Problem(ds.beta[0], ds.phi()[0], cfg)
        Mu = prob.project(np.full(ds.beta[0].shape, 0.1))
        for kernel, fn in cases(prob, Mu, cfg).items():
            t = {b: time_call(lambda k=k: fn(k), args.repeat) for b, k in backends.items()}
            rows.append({"preset": preset, "M": cfg.M, "K": cfg.K_max, "kernel": kernel,
                         "python_s": t["python"], "compiled_s": t["compiled"],
                         "speedup": t["python"] / t["compiled"]})
    print(f"{'preset':<10} {'M x K':>8} {'kernel':<13} {'python':>11} {'compiled':>11} {'speedup':>8}")
    for r in rows:
        print(f"{r['preset']:<10} {r['M']:>4}x{r['K']:<3} {r['kernel']:<13} "
              f"{r['python_s'] * 1e6:>9.1f}us {r['compiled_s'] * 1e6:>9.1f}us {r['speedup']:>7.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
