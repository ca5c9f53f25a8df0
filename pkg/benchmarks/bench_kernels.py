"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run on the default 64x64 / 90x96 geometry and on the
regularizer's 8-channel 3x3 layers.  Outputs of the two backends are compared
before timing so a broken build cannot produce a flattering number.
"""

import argparse
import timeit

import numpy as np
import scipy.sparse as sp

from dulda import _pykernels
from dulda.projector import GridSpec, SinogramSpec, fov_mask

try:
    from dulda import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _cases(n=64, n_angles=90, n_bins=96, channels=8):
    rng = np.random.default_rng(0)
    grid = GridSpec(n_pixels_per_side=n, pixel_size=1.0)
    sino = SinogramSpec(n_angles=n_angles, n_bins=n_bins, bin_width=1.0)
    thetas = sino.angles
    mask = fov_mask(grid).ravel()
    x = rng.standard_normal((channels, n, n))
    w = rng.standard_normal((channels, channels, 3, 3))
    gy = rng.standard_normal((channels, n, n))
    return {
        "strip_triplets": lambda k: k.strip_triplets(
            n, 1.0, thetas, sino.n_bins, sino.bin_width, mask),
        "conv2d": lambda k: k.conv2d(x, w),
        "conv2d_transpose": lambda k: k.conv2d_transpose(gy, w),
        "conv2d_weight_grad": lambda k: k.conv2d_weight_grad(x, gy, 3, 3),
    }


def _dense(out, shape):
    # triplet lists may differ in zero-area entries, so compare matrices
    if isinstance(out, tuple):
        rows, cols, vals = out
        return sp.csr_matrix((vals, (rows, cols)), shape=shape).toarray()
    return out


def _same(a, b, shape):
    return np.allclose(_dense(a, shape), _dense(b, shape), rtol=1e-9, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not available; only the fallback can run")
    print(f"{'kernel':<20} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, call in _cases().items():
        t_py = min(timeit.repeat(lambda: call(_pykernels), number=1, repeat=args.repeat))
        if _ckernels is None:
            print(f"{name:<20} {1e3 * t_py:10.2f} {'-':>10} {'-':>8}")
            continue
        if not _same(call(_pykernels), call(_ckernels), (90 * 96, 64 * 64)):
            raise SystemExit(f"{name}: backends disagree")
        t_c = min(timeit.repeat(lambda: call(_ckernels), number=1, repeat=args.repeat))
        print(f"{name:<20} {1e3 * t_py:10.2f} {1e3 * t_c:10.2f} {t_py / t_c:8.2f}")


if __name__ == "__main__":
    main()
