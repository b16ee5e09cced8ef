"""Compiled vs pure-Python kernel timings.

    python benchmarks/bench_kernels.py [--steps 2000] [--repeat 3]

Times the plant integration loop (the hot path of every closed-loop run)
and single string-current solves on both backends, and checks that the two
produce identical trajectories.
"""
import argparse
import time

import numpy as np

from mpptsim import kernels
from mpptsim.converter import ConverterParams
from mpptsim.pvmodel import ShadingPattern, default_module, string_rows


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def integrate_once(backend, rows, params, n_steps):
    state = np.array([80.0, 4.0, 130.0, 0.4, 0.0])
    state[4] = kernels.string_current(state[0], rows, 0.0, backend=backend)
    out = np.zeros((n_steps // 10, 7))
    kernels.integrate(state, params.kernel_tuple, rows, 0.0, 1, 83.0, 0.0, 1.1,
                      params.d_min, params.d_max, n_steps, 0, 10, out, backend=backend)
    return state, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--solves", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rows = string_rows([default_module()] * 3, ShadingPattern((600, 800, 1000)))
    params = ConverterParams()
    backends = ["python"]
    try:
        kernels.backend_module("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled kernel not built; timing the Python backend only")

    volts = np.linspace(0.0, 95.0, args.solves)
    results = {}
    for b in backends:
        t_int = best_of(lambda: integrate_once(b, rows, params, args.steps), args.repeat)
        t_sol = best_of(lambda: [kernels.string_current(v, rows, 0.0, backend=b)
                                 for v in volts], args.repeat)
        results[b] = (t_int, t_sol)
        print(f"{b:>7}: integrate {1e6 * t_int / args.steps:9.2f} us/step   "
              f"string_current {1e6 * t_sol / args.solves:8.2f} us/solve")

    if len(backends) == 2:
        (ci, cs), (pi, ps) = results["cython"], results["python"]
        print(f"speed-up: integrate x{pi / ci:.0f}, string_current x{ps / cs:.1f}")
        s_c, o_c = integrate_once("cython", rows, params, args.steps)
        s_p, o_p = integrate_once("python", rows, params, args.steps)
        print(f"max trajectory difference: {np.max(np.abs(o_c - o_p)):.3g}")


if __name__ == "__main__":
    main()
