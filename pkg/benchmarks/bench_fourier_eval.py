"""Off-grid Fourier summation: numba kernel vs numpy fallback.

This is the inner loop of the backward-characteristics flow solver.  Run

    python benchmarks/bench_fourier_eval.py
    CIEULER_NO_NUMBA=1 python benchmarks/bench_fourier_eval.py

The second form checks that the fallback is what actually runs when numba is
switched off.
"""
import argparse
import time

import numpy as np

from cieuler import _accel


def workload(n_modes, n_pts, seed=0):
    rng = np.random.default_rng(seed)
    kvec = rng.integers(-6, 7, size=(n_modes, 3))
    coef = rng.normal(size=(n_modes, 3)) + 1j * rng.normal(size=(n_modes, 3))
    pts = rng.uniform(0, 2 * np.pi, size=(n_pts, 3))
    return kvec, coef, pts


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--modes", type=int, default=400)
    p.add_argument("--points", type=int, default=32 ** 3)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()

    kvec, coef, pts = workload(args.modes, args.points)
    print(f"numba available: {_accel.HAVE_NUMBA} (CIEULER_NO_NUMBA={'set' if _accel.DISABLED else 'unset'})")
    ref = _accel.fourier_eval(kvec, coef, pts, use_numba=False)
    t_np = best_of(lambda: _accel.fourier_eval(kvec, coef, pts, use_numba=False), args.repeat)
    print(f"numpy  {t_np * 1e3:9.1f} ms  ({args.modes} modes x {args.points} points)")
    if _accel.HAVE_NUMBA:
        _accel.fourier_eval(kvec, coef, pts[:8], use_numba=True)  # compile outside the timing
        out = _accel.fourier_eval(kvec, coef, pts, use_numba=True)
        t_nb = best_of(lambda: _accel.fourier_eval(kvec, coef, pts, use_numba=True), args.repeat)
        err = float(np.abs(out - ref).max() / np.abs(ref).max())
        print(f"numba  {t_nb * 1e3:9.1f} ms  speedup {t_np / t_nb:5.2f}x  max rel diff {err:.1e}")


if __name__ == "__main__":
    main()
