"""Time the compiled Jacobi eigensolver against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--sizes 8,16,32,64] [--repeats 5]

Prints one line per matrix size with the best-of-N wall time of each
backend, the speed-up, and the largest eigenvalue disagreement with
``numpy.linalg.eigh``.
"""

import argparse
import timeit

import numpy as np

from clvm import _jacobi_py

try:
    from clvm import _kernels
except ImportError:
    _kernels = None


def random_spd(d, seed):
    a = np.random.default_rng(seed).standard_normal((d, d))
    return a @ a.T / d + np.eye(d)


def best_time(fn, a, repeats):
    return min(timeit.repeat(lambda: fn(a), number=1, repeat=repeats))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="8,16,32,64")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled kernels are not built; only the numpy fallback is available")
    print(f"{'d':>5} {'python_ms':>11} {'cython_ms':>11} {'speedup':>8} {'max_eig_err':>12}")
    for d in (int(s) for s in args.sizes.split(",")):
        a = random_spd(d, d)
        ref = np.linalg.eigh(a)[0]
        t_py = best_time(_jacobi_py.jacobi_eigh, a, args.repeats)
        err = np.max(np.abs(np.sort(_jacobi_py.jacobi_eigh(a)[0]) - ref))
        if _kernels is not None:
            t_cy = best_time(_kernels.jacobi_eigh, a, args.repeats)
            err = max(err, np.max(np.abs(np.sort(_kernels.jacobi_eigh(a)[0]) - ref)))
            print(f"{d:>5} {1e3 * t_py:>11.3f} {1e3 * t_cy:>11.3f} {t_py / t_cy:>8.1f} {err:>12.2e}")
        else:
            print(f"{d:>5} {1e3 * t_py:>11.3f} {'-':>11} {'-':>8} {err:>12.2e}")


if __name__ == "__main__":
    main()
