"""Time the compiled kernels against the numpy fallback on representative workloads.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 3] [--paths 500]

Each workload runs through the public solvers with the kernel table pointed
at one backend, then at the other; the script reports the best wall time of
each, the speed-up and the largest difference between the two results.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from potmfg import _pykernels, kernels, viscous
from potmfg.inviscid import gradient_field, hjb_solve
from potmfg.model import builtin_example_d2, random_potential_model
from potmfg.selection import SelectionSchedule
from potmfg.simplex import SimplexGrid, interpolate_values

try:
    from potmfg import _ckernels
except ImportError:
    _ckernels = None

KERNELS = ("phi_value", "interp_points", "hjb_backward", "linear_backward", "simulate_chunk")


def use_backend(module) -> None:
    for name in KERNELS:
        setattr(kernels, name, getattr(module, name))


def best_time(fn, repeat: int):
    best, out = np.inf, None
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def workloads(n_paths: int) -> dict:
    d2 = builtin_example_d2(3.0)
    d3 = random_potential_model(3, 1.0, 0)
    g2 = SimplexGrid(2, 1 / 200)
    g3 = SimplexGrid(3, 1 / 40)
    cfg = SelectionSchedule((0.2,)).for_model(d2).config(0.2)
    value3 = hjb_solve(d3, g3)
    pts = np.random.default_rng(0).dirichlet(np.ones(3), size=20000)[:, :2]
    V2 = viscous.extract_V(viscous.hjb_solve_viscous(d2, cfg, SimplexGrid(2, 1 / 100)))

    return {
        "hjb d=2 h=1/200": lambda: hjb_solve(d2, g2).values,
        "hjb d=3 h=1/40": lambda: hjb_solve(d3, g3).values,
        "viscous hjb d=2 h=1/100": lambda: viscous.hjb_solve_viscous(d2, cfg, SimplexGrid(2, 1 / 100)).values,
        "population cost d=2": lambda: viscous.solve_Y(V2, d2, cfg).values,
        "interpolate 20k points d=3": lambda: interpolate_values(g3, value3.values[0], pts)[0],
        f"simulate {n_paths} paths d=2": lambda: viscous.simulate(d2, cfg, np.array([0.75, 0.25]), 1e-3, n_paths, 0,
                                                                 feedback=V2).p,
        "gradient d=3": lambda: gradient_field(value3).values,
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--paths", type=int, default=500)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels are not built; only the numpy fallback is available")
        return
    jobs = workloads(args.paths)
    print(f"{'workload':32s} {'compiled s':>11s} {'numpy s':>10s} {'speed-up':>9s} {'max diff':>10s}")
    for name, fn in jobs.items():
        use_backend(_ckernels)
        t_c, out_c = best_time(fn, args.repeat)
        use_backend(_pykernels)
        t_p, out_p = best_time(fn, args.repeat)
        diff = float(np.max(np.abs(np.asarray(out_c) - np.asarray(out_p))))
        print(f"{name:32s} {t_c:11.4f} {t_p:10.4f} {t_p / t_c:9.1f} {diff:10.2e}")
    use_backend(_ckernels)


if __name__ == "__main__":
    main()
