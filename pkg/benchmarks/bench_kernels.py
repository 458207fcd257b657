"""Time the numba kernels against their pure-numpy twins.

Run:  python3 benchmarks/bench_kernels.py [--repeats 3]

Two families are compared on training-shaped inputs:

* sliding-window disarray over a full synthetic round (the indicator path),
* conv2d forward/backward at the two shapes the dual encoder uses most.

The dispatch in ``csibts.backend`` follows what this script shows: the njit
disarray sweep wins by an order of magnitude (entropy via one log per packet
instead of per window), while for these conv shapes im2col+BLAS beats the
scalar njit loops, so conv dispatches to numpy even when numba is present.
"""
import argparse
import time
import timeit

import numpy as np

from csibts import backend


def best_of(fn, repeats):
    fn()                                        # warm-up (jit compile, caches)
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def bench_disarray(repeats):
    rng = np.random.default_rng(0)
    t_len, tau = 2400, 50
    data = rng.random((t_len, 56, 4))
    anchors = np.arange(tau - 1, t_len, dtype=np.int64)
    rows = []
    for name, fn in (("numpy", backend.disarray_windows_numpy),
                     ("njit", backend.disarray_windows_njit)):
        secs = best_of(lambda: fn(data, anchors, tau, 1.0, 1.0), repeats)
        rows.append((f"disarray_windows[{len(anchors)} windows]", name, secs))
    a = backend.disarray_windows_numpy(data, anchors[:64], tau, 1.0, 1.0)
    b = backend.disarray_windows_njit(data, anchors[:64], tau, 1.0, 1.0)
    assert np.max(np.abs(a - b)) / np.max(np.abs(a)) < 1e-9
    return rows


def bench_conv(repeats):
    rng = np.random.default_rng(1)
    cases = {
        "conv2d stem (16,4,50,56)->32": ((16, 4, 50, 56), (32, 4, 3, 3), 2, 1),
        "conv2d block (16,32,25,28)->32": ((16, 32, 25, 28), (32, 32, 3, 3), 2, 1),
    }
    rows = []
    for label, (xs, ws, stride, pad) in cases.items():
        x = rng.standard_normal(xs)
        w = rng.standard_normal(ws)
        b = rng.standard_normal(ws[0])
        y = backend.conv2d_numpy(x, w, b, stride=stride, pad=pad)
        dy = rng.standard_normal(y.shape)
        for name, fwd, bwd in (
                ("numpy", backend.conv2d_numpy, backend.conv2d_grads_numpy),
                ("njit", backend.conv2d_njit, backend.conv2d_grads_njit)):
            secs = best_of(lambda: fwd(x, w, b, stride=stride, pad=pad), repeats)
            rows.append((label, name, secs))
            secs = best_of(lambda: bwd(x, w, dy, stride=stride, pad=pad), repeats)
            rows.append((label + " grads", name, secs))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    if not backend.HAVE_NUMBA:
        print("numba unavailable (or disabled via CSIBTS_NO_NUMBA); "
              "njit rows run the pure-python fallback and will be slow")

    t0 = time.perf_counter()
    rows = bench_disarray(args.repeats) + bench_conv(args.repeats)
    by_kernel = {}
    for kernel, path, secs in rows:
        by_kernel.setdefault(kernel, {})[path] = secs

    width = max(len(k) for k in by_kernel)
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'njit':>10}  {'ratio':>7}")
    for kernel, paths in by_kernel.items():
        ratio = paths["numpy"] / paths["njit"]
        print(f"{kernel:<{width}}  {paths['numpy']:>9.4f}s  {paths['njit']:>9.4f}s  "
              f"{ratio:>6.2f}x")
    print(f"\nratio > 1 means the njit path is faster; total "
          f"{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
