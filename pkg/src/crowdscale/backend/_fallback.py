"""Pure-numpy implementations of the hot kernels.

These are the reference implementations; the compiled extension in
``crowdscale._core`` provides the same five entry points with identical
semantics. Everything here is fully vectorized, so the fallback is usable
for real runs, not just as a stopgap.
"""

import numpy as np


def im2col(xp, k, dilation, out_h, out_w):
    """Gather dilated k*k patches from a padded input.

    xp: (n, c, hp, wp) padded input, C-contiguous.
    Returns (n, c*k*k, out_h*out_w) with taps ordered (c, ky, kx).
    """
    n, c, hp, wp = xp.shape
    eff = dilation * (k - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (eff, eff), axis=(2, 3))
    win = win[:, :, :out_h, :out_w, ::dilation, ::dilation]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, out_h * out_w)
    return np.ascontiguousarray(cols)


def maxpool2_forward(x):
    """2x2 max pooling. Returns (out, idx) where idx in {0..3} is the
    row-major position of the first maximum inside each block."""
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(flat, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(dy, idx, h, w):
    """Route gradients to the argmax cell of each 2x2 block."""
    n, c, h2, w2 = dy.shape
    dx6 = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(dx6, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = dx6.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return np.ascontiguousarray(dx)


def bilinear_forward(x, y0, y1, wy, x0, x1, wx):
    """Bilinear gather with precomputed per-axis source indices/weights."""
    wy = wy[:, None]
    wx = wx[None, :]
    tl = x[:, :, y0[:, None], x0[None, :]]
    tr = x[:, :, y0[:, None], x1[None, :]]
    bl = x[:, :, y1[:, None], x0[None, :]]
    br = x[:, :, y1[:, None], x1[None, :]]
    out = ((1 - wy) * (1 - wx) * tl + (1 - wy) * wx * tr
           + wy * (1 - wx) * bl + wy * wx * br)
    return np.ascontiguousarray(out)


def bilinear_backward(dy, y0, y1, wy, x0, x1, wx, h, w):
    """Scatter-add the four corner contributions back to the source grid."""
    n, c = dy.shape[:2]
    wy2 = wy[:, None]
    wx2 = wx[None, :]
    dxT = np.zeros((h, w, n, c), dtype=dy.dtype)
    dyT = dy.transpose(2, 3, 0, 1)
    for yi, xi, ww in (
        (y0, x0, (1 - wy2) * (1 - wx2)),
        (y0, x1, (1 - wy2) * wx2),
        (y1, x0, wy2 * (1 - wx2)),
        (y1, x1, wy2 * wx2),
    ):
        np.add.at(dxT, (yi[:, None], xi[None, :]), ww[..., None, None] * dyT)
    return np.ascontiguousarray(dxT.transpose(2, 3, 0, 1))
