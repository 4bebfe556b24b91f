"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from sfnet import _kernels_py as fallback

try:
    from sfnet import _kernels as compiled
except ImportError:  # pragma: no cover
    compiled = None


def cases(rng):
    x = rng.normal(size=(16, 32, 34, 34)).astype(np.float32)
    cols = fallback.im2col(x, 3, 3, 1, 32, 32)
    pool_in = rng.normal(size=(16, 32, 32, 32)).astype(np.float32)
    out, arg = fallback.maxpool_forward(pool_in, 3, 2)
    g = np.ones_like(out)
    z = rng.normal(size=(16, 32, 64, 64)) + 0j
    return {
        "im2col 16x32x32x32 k3": lambda k: k.im2col(x, 3, 3, 1, 32, 32),
        "col2im 16x32x32x32 k3": lambda k: k.col2im(cols, 16, 32, 34, 34, 3, 3, 1, 32, 32),
        "maxpool fwd k3 s2": lambda k: k.maxpool_forward(pool_in, 3, 2),
        "maxpool bwd k3 s2": lambda k: k.maxpool_backward(g, arg, 32, 32),
        "fft rows 16x32x64x64": lambda k: k.fft_axis(z, 3),
        "fft cols 16x32x64x64": lambda k: k.fft_axis(z, 2),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=10)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = {"python": fallback}
    if compiled is not None:
        backends["compiled"] = compiled
    print(f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(rng).items():
        times = {b: min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) * 1e3
                 for b, k in backends.items()}
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{name:<24}" + "".join(f"{t:>10.2f}ms" for t in times.values()) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
