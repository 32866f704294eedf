"""Compare the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--batch 64] [--repeat 20]

Prints one CSV row per (kernel, backend) with the median wall time and the
speedup of numba over numpy.  Outputs of both backends are checked for
bit-identity before timing.
"""

import argparse
import statistics
import time

import numpy as np

from owadiag import _kernels
from owadiag.harness import TrainConfig, train
from owadiag.layouts import build_layout
from owadiag.nn import conv2d_backward, conv2d_forward, owa_pool_backward, owa_pool_forward
from owadiag.quantifiers import Quantifier


def timeit(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(batch, rng):
    q = Quantifier("Most")
    x_pool = rng.normal(size=(batch, 64, 12, 4))
    out, cache = owa_pool_forward(x_pool, (2, 2), q)
    g_pool = rng.normal(size=out.shape)
    x_conv = rng.normal(size=(batch, 64, 12, 4))
    kernel = rng.normal(size=(64, 64, 3, 3))
    bias = np.zeros(64)
    cout, ccache = conv2d_forward(x_conv, kernel, bias)
    g_conv = rng.normal(size=cout.shape)
    layout = build_layout("model7", q, 12, 4, 6)
    X = rng.normal(size=(batch, 1, 12, 4))
    y = rng.integers(0, 6, batch)
    cfg = TrainConfig(epochs=1, batch_size=batch)
    return {
        "owa_pool_forward": lambda: owa_pool_forward(x_pool, (2, 2), q)[0],
        "owa_pool_backward": lambda: owa_pool_backward(g_pool, cache),
        "conv2d_forward": lambda: conv2d_forward(x_conv, kernel, bias)[0],
        "conv2d_backward": lambda: conv2d_backward(g_conv, ccache)[0],
        "model7_train_step": lambda: train(layout, X, y, cfg)[0].parameters()[0],
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    fns = cases(args.batch, np.random.default_rng(args.seed))
    prev = _kernels.get_backend()
    print("kernel,backend,median_ms,speedup")
    try:
        for name, fn in fns.items():
            results, timings = {}, {}
            for backend in ("numpy", "numba"):
                _kernels.set_backend(backend)
                results[backend] = np.array(fn())
                timings[backend] = timeit(fn, args.repeat)
            if not np.array_equal(results["numpy"], results["numba"]):
                raise SystemExit(f"{name}: backends disagree")
            for backend in ("numpy", "numba"):
                speed = timings["numpy"] / timings[backend]
                print(f"{name},{backend},{timings[backend] * 1e3:.3f},{speed:.2f}")
    finally:
        _kernels.set_backend(prev)


if __name__ == "__main__":
    main()
