"""Compare the compiled and numpy kernel backends.

Times each kernel on synthetic inputs of a few sizes, then one full MerDel
fit per backend, and checks that both backends agree on the outputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import platform
import timeit

import numpy as np

from fedmerdel import kernels
from fedmerdel.datagen import GenSpec, generate
from fedmerdel.merdel import MerDelConfig, fit_merdel
from fedmerdel.model import expected_log_phi, expected_log_pi

SIZES = [(1_000, 60, 20), (10_000, 100, 20), (50_000, 100, 40)]


def _inputs(n, p, k, seed=0):
    gen = generate(GenSpec(n=n, p=p, k_true=min(k, 10), seed=seed))
    data = gen.data
    rng = np.random.default_rng(seed)
    eps_star = rng.gamma(2.0, 5.0, size=(k, data.n_columns))
    alpha_star = rng.gamma(2.0, 50.0, size=k)
    elogphi_t = np.ascontiguousarray(expected_log_phi(eps_star, data.cardinalities).T)
    elogpi = expected_log_pi(alpha_star)
    resp = rng.dirichlet(np.ones(k), size=n)
    modes = data.values[rng.choice(n, size=k, replace=False)].copy()
    return data, elogpi, elogphi_t, resp, modes


def bench_kernels(repeat: int) -> list[dict]:
    rows = []
    mods = {name: kernels.backend_module(name) for name in ("cython", "python")}
    for n, p, k in SIZES:
        data, elogpi, elogphi_t, resp, modes = _inputs(n, p, k)
        calls = {
            "estep": lambda m: m.estep(data.idx, elogpi, elogphi_t),
            "category_counts": lambda m: m.category_counts(data.idx, resp, data.n_columns),
            "hamming_assign": lambda m: m.hamming_assign(data.values, modes),
        }
        for kernel, call in calls.items():
            times = {}
            for name, mod in mods.items():
                call(mod)  # warm caches
                times[name] = min(timeit.repeat(lambda: call(mod), number=1, repeat=repeat))
            a, b = call(mods["cython"]), call(mods["python"])
            a0 = a[0] if isinstance(a, tuple) else a
            b0 = b[0] if isinstance(b, tuple) else b
            rows.append({"kernel": kernel, "n": n, "p": p, "k": k,
                         "cython_s": times["cython"], "python_s": times["python"],
                         "speedup": times["python"] / times["cython"],
                         "max_abs_diff": float(np.max(np.abs(np.asarray(a0, float) - np.asarray(b0, float))))})
    return rows


def bench_fit(repeat: int) -> list[dict]:
    gen = generate(GenSpec(n=5000, p=100, k_true=10, seed=1))
    config = MerDelConfig(k_init=20, laps=5, seed=0)
    rows, labels = [], {}
    for name in ("cython", "python"):
        kernels.use(name)
        times = timeit.repeat(lambda: fit_merdel(gen.data, config), number=1, repeat=max(1, repeat // 2))
        fitted = fit_merdel(gen.data, config)
        labels[name] = fitted.labels
        rows.append({"backend": name, "seconds": min(times), "elbo": fitted.elbo_final})
    kernels.use("auto")
    rows.append({"labels_identical": bool(np.array_equal(labels["cython"], labels["python"]))})
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="also write results here")
    args = parser.parse_args(argv)
    try:
        kernels.backend_module("cython")
    except ImportError:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    kern = bench_kernels(args.repeat)
    print(f"{'kernel':<16}{'N':>8}{'P':>5}{'K':>4}{'cython ms':>12}{'python ms':>12}{'speedup':>9}{'max diff':>11}")
    for r in kern:
        print(f"{r['kernel']:<16}{r['n']:>8}{r['p']:>5}{r['k']:>4}{1e3 * r['cython_s']:>12.2f}"
              f"{1e3 * r['python_s']:>12.2f}{r['speedup']:>9.2f}{r['max_abs_diff']:>11.1e}")
    fit = bench_fit(args.repeat)
    print()
    for r in fit[:-1]:
        print(f"full fit ({r['backend']}): {r['seconds']:.3f} s, ELBO {r['elbo']:.6f}")
    print(f"labels identical across backends: {fit[-1]['labels_identical']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"machine": platform.platform(), "python": platform.python_version(),
                       "kernels": kern, "fit": fit}, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
