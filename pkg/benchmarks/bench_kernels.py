"""Time the numba and numpy kernel paths side by side.

    python benchmarks/bench_kernels.py [--repeat 5]

Both paths must produce identical bits; the script checks that before timing.
"""

import argparse
import time

import numpy as np

from yolocs._backend import NUMBA_AVAILABLE
from yolocs.tensor import _kernels

CASES = [
    # (n, c_in, c_out, h, k, stride)
    (1, 64, 64, 80, 1, 1),
    (1, 64, 64, 40, 3, 1),
    (1, 32, 64, 80, 3, 2),
    (8, 16, 16, 24, 3, 1),
    (1, 3, 32, 160, 6, 2),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_conv(case, repeat, rng):
    n, ci, co, h, k, s = case
    pad = k // 2 if k != 6 else 2
    x = rng.standard_normal((n, ci, h, h)).astype(np.float32)
    w = rng.standard_normal((co, ci, k, k)).astype(np.float32)
    b = rng.standard_normal(co).astype(np.float32)
    ho = (h + 2 * pad - k) // s + 1
    outs = {}
    timings = {}
    paths = [("numpy", False, False)]
    if NUMBA_AVAILABLE:
        paths += [("numba", True, False), ("numba-par", True, True)]
    for name, use_numba, parallel in paths:
        out = np.empty((n, co, ho, ho), dtype=np.float32)

        def run():
            _kernels.conv_forward(x, w, b, s, pad, True, out, use_numba=use_numba, parallel=parallel)

        run()  # warm-up / compile
        outs[name] = out.copy()
        timings[name] = best_of(run, repeat)
    ref = outs["numpy"]
    assert all(np.array_equal(o, ref) for o in outs.values()), "paths disagree"
    return timings


def bench_grad_input(case, repeat, rng):
    n, ci, co, h, k, s = case
    pad = k // 2 if k != 6 else 2
    ho = (h + 2 * pad - k) // s + 1
    go = rng.standard_normal((n, co, ho, ho)).astype(np.float32)
    w = rng.standard_normal((co, ci, k, k)).astype(np.float32)
    timings, outs = {}, {}
    for name, use_numba in [("numpy", False)] + ([("numba", True)] if NUMBA_AVAILABLE else []):
        out = np.empty((n, ci, h, h), dtype=np.float32)

        def run():
            _kernels.conv_grad_input(go, w, s, pad, out, use_numba=use_numba)

        run()
        outs[name] = out.copy()
        timings[name] = best_of(run, repeat)
    assert all(np.array_equal(o, outs["numpy"]) for o in outs.values()), "paths disagree"
    return timings


def bench_maxpool(repeat, rng):
    x = rng.standard_normal((1, 256, 20, 20)).astype(np.float32)
    timings = {}
    for name, use_numba in [("numpy", False)] + ([("numba", True)] if NUMBA_AVAILABLE else []):
        out = np.empty_like(x)
        arg = np.empty(x.shape, dtype=np.int64)

        def run():
            _kernels.maxpool_forward(x, 5, 2, out, arg, use_numba=use_numba)

        run()
        timings[name] = best_of(run, repeat)
    return timings


def fmt(label, t):
    base = t["numpy"]
    cols = "  ".join(f"{k}={v * 1e3:8.2f}ms (x{base / v:5.1f})" for k, v in t.items())
    print(f"{label:<34} {cols}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba available: {NUMBA_AVAILABLE}")
    for case in CASES:
        fmt("conv fwd n{} {}->{} {}px k{} s{}".format(*case), bench_conv(case, args.repeat, rng))
    for case in CASES:
        fmt("conv dgrad n{} {}->{} {}px k{} s{}".format(*case), bench_grad_input(case, args.repeat, rng))
    fmt("maxpool k5 256ch 20px", bench_maxpool(args.repeat, rng))


if __name__ == "__main__":
    main()
