"""Compare the compiled and numpy kernel backends on model-sized inputs.

Run with ``python benchmarks/bench_kernels.py``.  Reports the median wall time
per call for each kernel and backend and the max absolute difference between
the backends' outputs.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from promptiml.tensor.kernels import available_backends


def cases(rng, dtype):
    # deformable attention at level 1 of the default config: 2 images x 2 heads,
    # 16x16 grid, 24 channels per head, 4 points per query
    value = rng.normal(size=(4, 16, 16, 24)).astype(dtype)
    points = rng.uniform(-1, 16, size=(4, 16 * 16 * 4, 2)).astype(dtype)
    grad = rng.normal(size=(4, points.shape[1], 24)).astype(dtype)
    # conv backward: 7x7 Bayar kernels on a 64x64 image
    dcols = rng.normal(size=(4, 64, 64, 3, 7, 7)).astype(dtype)
    return {
        "bilinear_gather": lambda m: m.bilinear_gather(value, points),
        "bilinear_scatter": lambda m: m.bilinear_scatter(grad, value, points),
        "col2im": lambda m: m.col2im(dcols, 64, 64, 1, 3),
    }


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([o.ravel() for o in out])
    return out.ravel()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}{'max|diff|':>12}")
    for name, fn in cases(rng, np.dtype(args.dtype)).items():
        times, outs = {}, {}
        for b, mod in backends.items():
            outs[b] = fn(mod)
            t = timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)
            times[b] = float(np.median(t))
        line = f"{name:<18}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
        if "cython" in backends:
            diff = np.max(np.abs(_flat(outs["numpy"]) - _flat(outs["cython"])))
            line += f"{times['numpy'] / times['cython']:>9.1f}x{diff:>12.2e}"
        print(line)


if __name__ == "__main__":
    main()
