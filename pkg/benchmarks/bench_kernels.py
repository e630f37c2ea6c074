"""Compare the compiled determinant kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--batch 20000] [--repeat 5]

Prints the best-of-``repeat`` time per call for each kernel, matrix size and
backend, plus the largest difference between the backends.
"""

import argparse
import time

import numpy as np

from crlab import kernels


def best_time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--directions", type=int, default=4)
    args = ap.parse_args(argv)
    if kernels.compiled_kernels is None:
        print("compiled kernels unavailable; only the numpy fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12}{'n':>3}{'numpy [ms]':>14}{'compiled [ms]':>15}{'speedup':>9}{'max diff':>11}")
    for n in (2, 3, 4, 5):
        M = rng.normal(size=(args.batch, n, n)) + 1j * rng.normal(size=(args.batch, n, n))
        dM = rng.normal(size=(args.batch, args.directions, n, n)) + 0j
        cases = {
            "batched_det": ((M,), lambda r: r),
            "det_jet": ((M, dM), lambda r: np.concatenate([r[0][:, None], r[1]], axis=1)),
        }
        for name, (call_args, flat) in cases.items():
            t_np = best_time(kernels.numpy_kernels[name], call_args, args.repeat)
            ref = flat(kernels.numpy_kernels[name](*call_args))
            if kernels.compiled_kernels is not None:
                t_c = best_time(kernels.compiled_kernels[name], call_args, args.repeat)
                diff = np.max(np.abs(flat(kernels.compiled_kernels[name](*call_args)) - ref))
                print(f"{name:<12}{n:>3}{1e3 * t_np:>14.2f}{1e3 * t_c:>15.2f}{t_np / t_c:>9.1f}{diff:>11.1e}")
            else:
                print(f"{name:<12}{n:>3}{1e3 * t_np:>14.2f}{'-':>15}{'-':>9}{'-':>11}")


if __name__ == "__main__":
    main()
