"""Timing of the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--paths 100000] [--steps 200] [--repeat 3]

Both backends are imported side by side from ``stochmech.kernels``; the
numba versions are warmed up once so compilation is not timed.
"""
import argparse
import time

import numpy as np

from stochmech import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def em_case(n_paths, n_steps, n_grid=400):
    rng = np.random.default_rng(0)
    x_min, x_max = -8.0, 8.0
    dx = (x_max - x_min) / (n_grid - 1)
    grid = np.linspace(x_min, x_max, n_grid)
    frames = np.stack([-grid, -0.9 * grid])  # OU drift, slowly varying in time
    ftimes = np.array([0.0, 1.0])
    x0 = rng.standard_normal(n_paths) / np.sqrt(2)
    z = rng.standard_normal((n_steps, n_paths))

    def run(block):
        return block(x0.copy(), np.zeros(n_paths, dtype=bool), z, frames, ftimes,
                     x_min, dx, 0.0, 1e-3, 1.0, 1.0)
    return run


def tridiag_case(n, n_solves):
    rng = np.random.default_rng(1)
    c = 0.5j * 1e-3 / (0.05**2)
    lower = np.full(n, -c / 2, dtype=complex)
    upper = lower.copy()
    diag = 1 + c + 0.5j * 1e-3 * rng.uniform(0, 10, n)
    rhs = rng.standard_normal((n_solves, n)) + 1j * rng.standard_normal((n_solves, n))

    def run(solve):
        for r in rhs:
            solve(lower, diag, upper, r)
    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--grid", type=int, default=800)
    ap.add_argument("--solves", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    if not kernels.HAVE_NUMBA:
        print("numba unavailable (or STOCHMECH_NO_NUMBA set); timing the numpy fallback only")

    rows = []
    em = em_case(args.paths, args.steps)
    t_np = best_of(lambda: em(kernels.em_block_numpy), args.repeat)
    t_nb = None
    if kernels.HAVE_NUMBA:
        a, _ = em(kernels.em_block_numba)  # compile
        b, _ = em(kernels.em_block_numpy)
        assert np.array_equal(a, b), "Euler-Maruyama backends disagree"
        t_nb = best_of(lambda: em(kernels.em_block_numba), args.repeat)
    rows.append((f"euler-maruyama {args.paths} paths x {args.steps} steps", t_np, t_nb))

    tri = tridiag_case(args.grid, args.solves)
    t_np = best_of(lambda: tri(kernels.tridiag_numpy), args.repeat)
    t_nb = None
    if kernels.HAVE_NUMBA:
        tri(kernels.tridiag_numba)
        t_nb = best_of(lambda: tri(kernels.tridiag_numba), args.repeat)
    rows.append((f"tridiagonal n={args.grid} x {args.solves} solves", t_np, t_nb))

    print(f"{'kernel':<44} {'numpy [s]':>10} {'numba [s]':>10} {'speedup':>8}")
    for name, a, b in rows:
        if b is None:
            print(f"{name:<44} {a:10.4f} {'-':>10} {'-':>8}")
        else:
            print(f"{name:<44} {a:10.4f} {b:10.4f} {a / b:8.1f}")


if __name__ == "__main__":
    main()
