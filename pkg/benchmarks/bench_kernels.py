"""Compiled vs numpy branch-flow kernels, and one AC-OPF solve per backend.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import importlib
import os
import timeit

import numpy as np

from pdcopf._kernels import flow_py

try:
    from pdcopf._kernels import flow_ext
except ImportError:
    flow_ext = None


def inputs(m, seed=0):
    rng = np.random.default_rng(seed)
    args = [rng.normal(size=m) for _ in range(4)]
    args += [rng.uniform(0.9, 1.1, m), rng.uniform(0.9, 1.1, m), rng.uniform(-0.5, 0.5, m)]
    return [np.ascontiguousarray(a) for a in args]


def bench_kernels(repeat):
    rows = []
    for m in (41, 80, 1000, 10000):
        args = inputs(m)
        w = [np.random.default_rng(1).normal(size=m) for _ in range(3)]
        for name, mod in (("numpy", flow_py), ("cython", flow_ext)):
            if mod is None:
                continue
            _, _, dp, dq = mod.branch_flows(*args)
            dp, dq = np.ascontiguousarray(dp), np.ascontiguousarray(dq)
            t_f = min(timeit.repeat(lambda: mod.branch_flows(*args), number=200, repeat=repeat)) / 200
            t_h = min(timeit.repeat(lambda: mod.branch_hessians(*args, *w, dp, dq), number=200,
                                    repeat=repeat)) / 200
            rows.append((m, name, t_f * 1e6, t_h * 1e6))
    return rows


def bench_acopf(repeat):
    import pdcopf._kernels as kernels
    from pdcopf.acopf import solve_acopf
    from pdcopf.case_io import load_case
    from pdcopf.model import DemandSample

    out = {}
    for case in ("case30", "case57"):
        net = load_case(case)
        d = DemandSample.nominal(net)
        for flag in ("", "1"):
            os.environ["PDCOPF_PURE_PYTHON"] = flag
            importlib.reload(kernels)
            t = min(timeit.repeat(lambda: solve_acopf(net, d), number=1, repeat=repeat))
            out[(case, kernels.BACKEND)] = t
    os.environ.pop("PDCOPF_PURE_PYTHON", None)
    importlib.reload(kernels)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'branches':>8} {'backend':>7} {'flows us':>10} {'hessians us':>12}")
    for m, name, tf, th in bench_kernels(args.repeat):
        print(f"{m:>8} {name:>7} {tf:>10.1f} {th:>12.1f}")
    print()
    for (case, backend), t in bench_acopf(max(1, args.repeat // 2)).items():
        print(f"acopf {case:<7} {backend:<7} {t * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
