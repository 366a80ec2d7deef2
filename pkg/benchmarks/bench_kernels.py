"""Time the conv kernels: numba im2col + BLAS versus pure numpy.

    python3 benchmarks/bench_kernels.py [--size 64] [--repeat 20]

Both backends live in one process; the dispatch flag only picks the default.
"""
import argparse
import time

import numpy as np

from oclttt import kernels
from oclttt._jit import HAVE_NUMBA

IMPLS = {
    "numpy": (kernels.conv2d_forward_numpy, kernels.conv2d_backward_input_numpy, kernels.conv2d_backward_weight_numpy),
    "numba": (kernels.conv2d_forward_loops, kernels.conv2d_backward_input_loops, kernels.conv2d_backward_weight_loops),
}


def layer_shapes(size, batch):
    # the default network's conv layers at the given input size
    s2, s4 = size // 2, size // 4
    return [
        ("enc1", (batch, 3, size, size), (16, 3, 3, 3), 1),
        ("enc2", (batch, 16, size, size), (16, 16, 3, 3), 2),
        ("enc3", (batch, 16, s2, s2), (32, 16, 3, 3), 1),
        ("enc4", (batch, 32, s2, s2), (32, 32, 3, 3), 2),
        ("mid", (batch, 32, s4, s4), (32, 32, 3, 3), 1),
        ("dec1", (batch, 32, s2, s2), (16, 32, 3, 3), 1),
        ("dec2", (batch, 16, size, size), (16, 16, 3, 3), 1),
    ]


def time_impl(impl, shapes, repeat, rng):
    fwd, bwd_in, bwd_w = impl
    args = []
    for _, xs, ws, stride in shapes:
        x, w, b = rng.normal(size=xs), rng.normal(size=ws), rng.normal(size=ws[0])
        y = fwd(x, w, b, stride, 1)
        args.append((x, w, b, stride, rng.normal(size=y.shape)))

    def one_pass():
        for x, w, b, stride, dy in args:
            fwd(x, w, b, stride, 1)
            bwd_in(dy, w, x.shape, stride, 1)
            bwd_w(dy, x, w.shape, stride, 1)
    one_pass()  # warm-up, includes compilation
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        one_pass()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--batch", type=int, default=2, help="2 = image plus mirror, as in one adaptation step")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba unavailable or disabled; the 'numba' row runs the same loops uncompiled")
    rng = np.random.default_rng(0)
    shapes = layer_shapes(args.size, args.batch)
    x0 = rng.normal(size=(2, 8, 11, 9))
    w0 = rng.normal(size=(5, 8, 3, 3))
    ref = kernels.conv2d_forward_numpy(x0, w0, None, 1, 1)
    assert np.allclose(kernels.conv2d_forward_loops(x0, w0, None, 1, 1), ref)
    print(f"conv fwd+bwd over {len(shapes)} layers, {args.size}x{args.size}, batch {args.batch}")
    times = {name: time_impl(impl, shapes, args.repeat, rng) for name, impl in IMPLS.items()}
    for name, t in times.items():
        print(f"  {name:6s} {t * 1e3:8.2f} ms")
    print(f"  speedup numba/numpy: {times['numpy'] / times['numba']:.2f}x")


if __name__ == "__main__":
    main()
