#!/usr/bin/env python3
"""Benchmark the compiled correlation core against the numpy fallback.

Runs the three raw kernels over a grid of sizes, then a full unfolded
forward+backward step, reporting per-call microseconds and the speedup.
Run it twice to see both sides selected at import:

    python3 benchmarks/bench_kernels.py
    PROXNN_FORCE_NUMPY=1 python3 benchmarks/bench_kernels.py   # fallback only
"""

import time

import numpy as np

from proxnn._kernels import BACKEND, numpy_backend

try:
    from proxnn._kernels import _corr3x3 as compiled
except ImportError:
    compiled = None


def timeit(fn, *args, repeat=200):
    fn(*args)  # warm-up / JIT-less sanity call
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat * 1e6  # microseconds


def bench_raw():
    print(f"selected backend at import: {BACKEND}")
    print(f"{'case':<28}{'numpy us':>12}{'compiled us':>14}{'speedup':>9}")
    rng = np.random.default_rng(0)
    for (J, C, H, W) in [(4, 1, 8, 8), (8, 1, 32, 32), (16, 3, 64, 64), (64, 3, 128, 128)]:
        k = rng.standard_normal((J, C, 3, 3))
        x = rng.standard_normal((C, H, W))
        u = rng.standard_normal((J, H, W))
        reps = max(20, int(2e6 / (J * C * H * W)))
        for name, args_np in (
            ("fwd", (k, x)),
            ("adj", (k, u)),
            ("wgrad", (u, x)),
        ):
            f_np = getattr(numpy_backend, f"corr3x3_{name}")
            t_np = timeit(f_np, *args_np, repeat=reps)
            if compiled is not None:
                f_c = getattr(compiled, f"corr3x3_{name}")
                t_c = timeit(f_c, *args_np, repeat=reps)
                print(
                    f"{name} J={J} C={C} {H}x{W:<10}{t_np:>12.1f}{t_c:>14.1f}"
                    f"{t_np / t_c:>8.1f}x"
                )
            else:
                print(f"{name} J={J} C={C} {H}x{W:<10}{t_np:>12.1f}{'-':>14}{'-':>9}")


def bench_forward_backward():
    import os

    from proxnn.autodiff import pnn_vjp
    from proxnn.pnn import init_pnn, pnn_forward

    print("\nfull unfolded forward+backward (ddfb-lno, K=5, J=8, 1x32x32):")
    model = init_pnn("ddfb", "lno", 5, 8, 1, seed=0)
    z = np.random.default_rng(1).uniform(0, 1, (1, 32, 32))

    def step():
        res = pnn_forward(model, z, nu=0.0064, record_tape=True)
        pnn_vjp(model, z, 0.0064, res.tape, res.x - z)

    t = timeit(step, repeat=50)
    print(f"  backend={BACKEND}: {t:.0f} us per sample step")
    if BACKEND == "compiled":
        print("  (rerun with PROXNN_FORCE_NUMPY=1 for the fallback number)")


if __name__ == "__main__":
    bench_raw()
    bench_forward_backward()
