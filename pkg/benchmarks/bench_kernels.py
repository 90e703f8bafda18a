"""Compare the compiled and numpy backends of the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times the conjugate-gradient Poisson solve on a gap-shaped region of a
160x160 frame and masked SSIM on a 256x256 slice, checks both backends agree,
and prints a table of best-of-N wall times.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from artinp import blend
from artinp._core import _fallback
from artinp.metrics import gaussian_window, ssim_centers

try:
    from artinp._core import _kernels
except ImportError:
    _kernels = None


def poisson_case(size=160, width=72, seed=0):
    rng = np.random.default_rng(seed)
    source = rng.uniform(0, 1, (size, size))
    target = rng.uniform(0, 1, (size, size))
    region = np.zeros((size, size), bool)
    start = (size - width) // 2
    region[:, start:start + width] = True
    system = blend.assemble(blend.BlendProblem(source, target, region))
    rows, cols = system.coords
    x0 = np.ascontiguousarray(target[rows, cols])
    return (system.neigh, system.degree, system.rhs, x0, 1e-6, 10 * len(x0))


def ssim_case(size=256, seed=1):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 4095, (size, size))
    b = np.clip(a + rng.normal(0, 100, a.shape), 0, 4095)
    yy, xx = np.mgrid[:size, :size]
    mask = (yy - size / 2) ** 2 + (xx - size / 2) ** 2 < (0.4 * size) ** 2
    rows, cols = ssim_centers(mask)
    return (a, b, gaussian_window(), rows, cols, (0.01 * 4095) ** 2, (0.03 * 4095) ** 2)


def best_time(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    if _kernels is None:
        print("compiled extension not built; only the numpy backend is available", file=sys.stderr)
    cases = {"poisson_cg (160x160, 72-px gap)": ("poisson_cg", poisson_case()),
             "ssim_at_centers (256x256, disk mask)": ("ssim_at_centers", ssim_case())}
    results = []
    print(f"{'kernel':40s} {'numpy [s]':>10s} {'cython [s]':>11s} {'speedup':>8s}")
    for label, (name, inputs) in cases.items():
        py_fn = getattr(_fallback, name)
        t_py = best_time(py_fn, inputs, args.repeat)
        row = {"kernel": label, "python_s": t_py, "cython_s": None, "speedup": None}
        if _kernels is not None:
            cy_fn = getattr(_kernels, name)
            ref, got = py_fn(*inputs), cy_fn(*inputs)
            ref = ref[0] if isinstance(ref, tuple) else ref
            got = got[0] if isinstance(got, tuple) else got
            err = float(np.abs(np.asarray(ref) - np.asarray(got)).max())
            t_cy = best_time(cy_fn, inputs, args.repeat)
            row.update(cython_s=t_cy, speedup=t_py / t_cy, max_abs_diff=err)
            print(f"{label:40s} {t_py:10.4f} {t_cy:11.4f} {t_py / t_cy:7.1f}x   (max |diff| {err:.1e})")
        else:
            print(f"{label:40s} {t_py:10.4f} {'-':>11s} {'-':>8s}")
        results.append(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
