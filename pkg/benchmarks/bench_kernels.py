"""Compare the numba and numpy paths of the hot kernels.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Both paths are called directly, so the env flag does not matter here. The
first numba call (compilation) is excluded from the timings.
"""

import argparse
import time

import numpy as np

from spatial_vae import _kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    imgs = rng.random((2000, 28, 28))
    thetas = rng.uniform(0, 2 * np.pi, len(imgs))
    shifts = rng.normal(0, 3, (len(imgs), 2))
    yield ("resample 2000x28x28",
           lambda: K.resample_numpy(imgs, thetas, shifts),
           lambda: K.resample_numba(imgs, thetas, shifts, 0.0))
    g, t = rng.standard_normal((100 * 784, 64)), np.tanh(rng.standard_normal((100 * 784, 64)))
    yield ("tanh_grad 78400x64",
           lambda: K.tanh_grad_numpy(g, t),
           lambda: K.tanh_grad_numba(g, t))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    if K.resample_numba is None:
        print("numba is not installed; only the numpy path is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}{'max |diff|':>12}")
    for name, ref, fast in cases(rng):
        t_ref = best_of(ref, args.repeat)
        if K.resample_numba is None:
            print(f"{name:<22}{t_ref * 1e3:>12.1f}")
            continue
        diff = float(np.max(np.abs(ref() - fast())))        # also compiles
        t_fast = best_of(fast, args.repeat)
        print(f"{name:<22}{t_ref * 1e3:>12.1f}{t_fast * 1e3:>12.1f}"
              f"{t_ref / t_fast:>8.1f}x{diff:>12.1e}")


if __name__ == "__main__":
    main()
