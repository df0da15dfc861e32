"""Compare the compiled and numpy im2col/col2im kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the default U-Net (48x48 phantoms, batch 8, widths 8..64).
Each row reports the best-of-N wall time per call in milliseconds.
"""
import argparse
import timeit

import numpy as np

from hcseg.kernels import _im2col_py

try:
    from hcseg.kernels import _im2col as compiled
except ImportError:  # extension not built
    compiled = None

SHAPES = [
    (8, 8, 48, 48),
    (8, 16, 24, 24),
    (8, 32, 12, 12),
    (8, 64, 6, 6),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=5, repeat=repeat)) / 5 * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = {"python": _im2col_py}
    if compiled is not None:
        backends["compiled"] = compiled
    else:
        print("compiled extension not available; timing the numpy backend only")

    rng = np.random.default_rng(0)
    print(f"{'kernel':8s} {'shape':18s} " + " ".join(f"{b:>10s}" for b in backends) + "    speedup")
    for shape in SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        cols = _im2col_py.im2col(x, 3, 1, 1)
        for kernel in ("im2col", "col2im"):
            times = {}
            for name, mod in backends.items():
                if kernel == "im2col":
                    times[name] = bench(lambda: mod.im2col(x, 3, 1, 1), args.repeat)
                else:
                    times[name] = bench(lambda: mod.col2im(cols, shape, 3, 1, 1), args.repeat)
            speed = f"{times['python'] / times['compiled']:9.2f}x" if "compiled" in times else ""
            print(f"{kernel:8s} {str(shape):18s} " + " ".join(f"{t:10.3f}" for t in times.values()) + speed)


if __name__ == "__main__":
    main()
