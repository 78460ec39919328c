"""Time each compute kernel under the numba and pure-numpy backends.

    python benchmarks/bench_kernels.py [--repeat N]

Both tables are built in-process via ``_kernels.implementations`` so the
COVSEG_DISABLE_NUMBA flag does not need toggling. Numba compile time is
excluded by one warm-up call per kernel.
"""

import argparse
import time

import numpy as np

from covseg import _kernels


def cases(rng):
    x = rng.standard_normal((4, 16, 66, 66)).astype(np.float32)
    cols = _kernels.im2col_numpy(x, 3, 3, 1)
    w = rng.standard_normal((16, 3, 3)).astype(np.float32)
    gout = rng.standard_normal((4, 16, 64, 64)).astype(np.float32)
    pool_in = rng.standard_normal((4, 16, 64, 64)).astype(np.float32)
    _, idx = _kernels.maxpool_forward_numpy(pool_in)
    pool_g = rng.standard_normal(idx.shape).astype(np.float32)
    mask = (rng.random((512, 512)) < 0.4).astype(np.uint8)
    theta = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    xs, ys = 256 + 200 * np.cos(theta) * rng.uniform(0.5, 1, 40), 256 + 200 * np.sin(theta) * rng.uniform(0.5, 1, 40)
    flags = (rng.random(300) < 0.8).astype(np.uint8)
    return {
        "im2col": (x, 3, 3, 1),
        "col2im": (cols, x.shape, 3, 3, 1),
        "depthwise_forward": (x, w),
        "depthwise_backward": (x, w, gout),
        "maxpool_forward": (pool_in,),
        "maxpool_backward": (pool_g, idx),
        "label8": (mask,),
        "polygon_mask": (xs, ys, 512, 512),
        "longest_run": (flags,),
    }


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.Generator(np.random.PCG64(0))
    nb, npy = _kernels.implementations("numba"), _kernels.implementations("numpy")
    print(f"{'kernel':<20}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, a in cases(rng).items():
        t_nb = best_of(nb[name], a, args.repeat)
        t_np = best_of(npy[name], a, args.repeat)
        print(f"{name:<20}{t_nb * 1e3:>12.3f}{t_np * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
