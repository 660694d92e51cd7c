"""Compare the compiled kernels against the pure-numpy fallback.

Times the five hot kernels in isolation and a full model forward+backward
pass under each backend, and verifies the outputs agree bitwise.

Run:  python3 benchmarks/bench_backends.py
"""

import time

import numpy as np

from crowdscale import backend, model, tensor as T
from crowdscale.tensor import Tensor4


def timeit(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _bilinear_args(src_h, src_w, dst_h, dst_w, dtype=np.float32):
    from crowdscale.tensor import _resample_coeffs
    y0, y1, wy = _resample_coeffs(src_h, dst_h, dtype)
    x0, x1, wx = _resample_coeffs(src_w, dst_w, dtype)
    return y0, y1, wy, x0, x1, wx


def bench_kernels(impl_name):
    impl = backend.get_impl(impl_name)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 64, 64, 64)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    results = {}

    results["im2col 3x3"] = timeit(lambda: impl.im2col(xp, 3, 1, 64, 64))
    out, idx = impl.maxpool2_forward(x)
    results["maxpool2 fwd"] = timeit(lambda: impl.maxpool2_forward(x))
    gy = rng.standard_normal(out.shape).astype(np.float32)
    results["maxpool2 bwd"] = timeit(lambda: impl.maxpool2_backward(gy, idx, 64, 64))
    up_args = _bilinear_args(32, 32, 64, 64)
    results["bilinear fwd"] = timeit(lambda: impl.bilinear_forward(out, *up_args))
    gy2 = rng.standard_normal((2, 64, 64, 64)).astype(np.float32)
    results["bilinear bwd"] = timeit(
        lambda: impl.bilinear_backward(gy2, *up_args, 32, 32))
    return results


def bench_model(impl_name):
    backend.use_backend(impl_name)
    cfg = model.ModelConfig(variant="CAN", width_multiplier=0.25, seed=0)
    params = model.build(cfg)
    rng = np.random.default_rng(1)
    img = Tensor4(rng.random((1, 3, 128, 128)).astype(np.float32))

    def fwd_bwd():
        params.zero_grad()
        out = model.forward(params, img)
        T.backward(T.tensor_sum(out))

    return timeit(fwd_bwd, repeats=3)


def check_agreement():
    rng = np.random.default_rng(2)
    a = backend.get_impl("cython")
    b = backend.get_impl("numpy")
    xp = rng.standard_normal((2, 8, 21, 17)).astype(np.float32)
    assert np.array_equal(a.im2col(xp, 3, 2, 17, 13), b.im2col(xp, 3, 2, 17, 13))
    xe = np.ascontiguousarray(xp[:, :, :16, :12])
    oa, ia = a.maxpool2_forward(xe)
    ob, ib = b.maxpool2_forward(xe)
    assert np.array_equal(oa, ob) and np.array_equal(ia, ib)
    gy = rng.standard_normal(oa.shape).astype(np.float32)
    assert np.array_equal(a.maxpool2_backward(gy, ia, 16, 12),
                          b.maxpool2_backward(gy, ib, 16, 12))
    args = _bilinear_args(16, 12, 31, 29)
    assert np.array_equal(a.bilinear_forward(xe, *args),
                          b.bilinear_forward(xe, *args))
    g2 = rng.standard_normal((2, 8, 31, 29)).astype(np.float32)
    assert np.array_equal(a.bilinear_backward(g2, *args, 16, 12),
                          b.bilinear_backward(g2, *args, 16, 12))
    print("kernel outputs agree bitwise across backends\n")


def main():
    names = backend.available_backends()
    print(f"available backends: {', '.join(names)}")
    if "cython" in names:
        check_agreement()

    rows = {name: bench_kernels(name) for name in names}
    kernels = list(next(iter(rows.values())))
    header = f"{'kernel':<16}" + "".join(f"{n:>12}" for n in names)
    print(header)
    print("-" * len(header))
    for k in kernels:
        print(f"{k:<16}" + "".join(f"{rows[n][k] * 1e3:>10.2f}ms" for n in names))

    print()
    for name in names:
        secs = bench_model(name)
        print(f"CAN 128x128 forward+backward [{name}]: {secs * 1e3:.1f} ms")
    backend.use_backend(backend.available_backends()[0])


if __name__ == "__main__":
    main()
