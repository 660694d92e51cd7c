"""The compiled kernels and the numpy fallback must agree bitwise."""

import numpy as np
import pytest

from crowdscale import backend
from crowdscale.tensor import _resample_coeffs


def impl_pairs():
    names = backend.available_backends()
    if "cython" not in names:
        pytest.skip("compiled backend not built")
    return backend.get_impl("cython"), backend.get_impl("numpy")


@pytest.fixture(params=[np.float32, np.float64], ids=["f32", "f64"])
def dtype(request):
    return request.param


def test_compiled_backend_is_built():
    assert "cython" in backend.available_backends()
    assert backend.backend_name() in ("cython", "numpy")


def test_im2col_agreement(dtype):
    a, b = impl_pairs()
    rng = np.random.default_rng(0)
    for k, dil, oh, ow in [(3, 1, 7, 5), (3, 2, 9, 9), (1, 1, 4, 6), (3, 3, 5, 5)]:
        eff = dil * (k - 1)
        xp = np.ascontiguousarray(
            rng.standard_normal((2, 3, oh + eff, ow + eff)).astype(dtype))
        np.testing.assert_array_equal(a.im2col(xp, k, dil, oh, ow),
                                      b.im2col(xp, k, dil, oh, ow))


def test_maxpool_agreement(dtype):
    a, b = impl_pairs()
    rng = np.random.default_rng(1)
    x = np.ascontiguousarray(rng.standard_normal((2, 4, 10, 8)).astype(dtype))
    oa, ia = a.maxpool2_forward(x)
    ob, ib = b.maxpool2_forward(x)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(ia, ib)
    gy = np.ascontiguousarray(rng.standard_normal(oa.shape).astype(dtype))
    np.testing.assert_array_equal(a.maxpool2_backward(gy, ia, 10, 8),
                                  b.maxpool2_backward(gy, ib, 10, 8))


def test_maxpool_tie_picks_first(dtype):
    a, b = impl_pairs()
    x = np.zeros((1, 1, 2, 2), dtype=dtype)   # 4-way tie
    for impl in (a, b):
        out, idx = impl.maxpool2_forward(x)
        assert idx[0, 0, 0, 0] == 0


def test_bilinear_agreement(dtype):
    a, b = impl_pairs()
    rng = np.random.default_rng(2)
    x = np.ascontiguousarray(rng.standard_normal((2, 3, 16, 12)).astype(dtype))
    for dst_h, dst_w in [(16, 12), (31, 29), (64, 48), (17, 13)]:
        y0, y1, wy = _resample_coeffs(16, dst_h, dtype)
        x0, x1, wx = _resample_coeffs(12, dst_w, dtype)
        np.testing.assert_array_equal(
            a.bilinear_forward(x, y0, y1, wy, x0, x1, wx),
            b.bilinear_forward(x, y0, y1, wy, x0, x1, wx))
        gy = np.ascontiguousarray(
            rng.standard_normal((2, 3, dst_h, dst_w)).astype(dtype))
        np.testing.assert_array_equal(
            a.bilinear_backward(gy, y0, y1, wy, x0, x1, wx, 16, 12),
            b.bilinear_backward(gy, y0, y1, wy, x0, x1, wx, 16, 12))


def test_use_backend_switches_dispatch():
    impl_pairs()
    original = backend.backend_name()
    try:
        backend.use_backend("numpy")
        assert backend.backend_name() == "numpy"
        assert backend.maxpool2_forward is backend.get_impl("numpy").maxpool2_forward
        backend.use_backend("cython")
        assert backend.backend_name() == "cython"
    finally:
        backend.use_backend(original)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        backend.get_impl("gpu")
