"""Time the compiled kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--sizes 2000 20000 200000] [--repeat 20]

The numba versions are called once before timing so compilation (or the
cache load) is not counted.  Each line reports the best of ``repeat`` runs.
"""
import argparse
import timeit

import numpy as np

from bubbling import _kernels as K


def cases(size, rng):
    nodes = np.cumsum(rng.uniform(0.5, 1.5, size))
    faces = 0.5 * (nodes[1:] + nodes[:-1])
    x = rng.uniform(-0.2, 0.2, size)
    w = rng.uniform(0.0, 1.0, size)
    off = rng.normal(size=size - 1)
    diag = rng.normal(size=size) + 4.0
    return {
        "remainder2": ((x, 7 / 3), K.remainder2_numpy, K._remainder2_loop,
                       lambda f, a: f(a[0], a[1], np.empty_like(a[0]))),
        "tridiag_matvec": ((off, diag, off, x), K.tridiag_matvec_numpy, K._tridiag_loop,
                           lambda f, a: f(*a, np.empty_like(a[3]))),
        "stiffness": ((nodes, faces, 5), K.stiffness_numpy, K._stiffness_loop,
                      lambda f, a: f(*a, np.empty(size - 1), np.empty(size))),
        "scaled_power_sum": ((w, x, 10 / 7), K.scaled_power_sum_numpy, K._scaled_power_loop,
                             lambda f, a: f(*a)),
        "sturm_count": ((off, diag), K.sturm_count_numpy, K._sturm_loop, lambda f, a: f(*a)),
    }


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[2000, 20000, 200000])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba available: {K.HAVE_NUMBA}")
    print(f"{'kernel':<18}{'size':>8}{'numpy [ms]':>13}{'numba [ms]':>13}{'speedup':>9}")
    for size in args.sizes:
        for name, (a, ref, jit, call) in cases(size, rng).items():
            t_np = best(lambda: ref(*a), args.repeat)
            if K.HAVE_NUMBA:
                call(jit, a)  # compile / load cache
                t_nb = best(lambda: call(jit, a), args.repeat)
                print(f"{name:<18}{size:>8}{1e3 * t_np:>13.3f}{1e3 * t_nb:>13.3f}{t_np / t_nb:>9.1f}")
            else:
                print(f"{name:<18}{size:>8}{1e3 * t_np:>13.3f}{'n/a':>13}{'':>9}")


if __name__ == "__main__":
    main()
