# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot gather/scatter kernels.

Semantics match crowdscale.backend._fallback exactly; the test suite runs
both implementations against each other.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int k, int dilation, int out_h, int out_w):
    cdef int n = xp.shape[0]
    cdef int c = xp.shape[1]
    cdef int hw = out_h * out_w
    cdef int i, ci, ky, kx, oy, ox, row
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    cols_arr = np.empty((n, c * k * k, hw), dtype=dtype)
    cdef real[:, :, ::1] cols = cols_arr
    with nogil:
        for i in range(n):
            for ci in range(c):
                for ky in range(k):
                    for kx in range(k):
                        row = (ci * k + ky) * k + kx
                        for oy in range(out_h):
                            for ox in range(out_w):
                                cols[i, row, oy * out_w + ox] = \
                                    xp[i, ci, oy + ky * dilation, ox + kx * dilation]
    return cols_arr


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef int n = x.shape[0]
    cdef int c = x.shape[1]
    cdef int h2 = x.shape[2] // 2
    cdef int w2 = x.shape[3] // 2
    cdef int i, ci, oy, ox, t, best
    cdef real v, vbest
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((n, c, h2, w2), dtype=dtype)
    idx_arr = np.empty((n, c, h2, w2), dtype=np.uint8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    with nogil:
        for i in range(n):
            for ci in range(c):
                for oy in range(h2):
                    for ox in range(w2):
                        best = 0
                        vbest = x[i, ci, 2 * oy, 2 * ox]
                        for t in range(1, 4):
                            v = x[i, ci, 2 * oy + (t >> 1), 2 * ox + (t & 1)]
                            if v > vbest:
                                vbest = v
                                best = t
                        out[i, ci, oy, ox] = vbest
                        idx[i, ci, oy, ox] = <unsigned char> best
    return out_arr, idx_arr


def maxpool2_backward(real[:, :, :, ::1] dy, unsigned char[:, :, :, ::1] idx,
                      int h, int w):
    cdef int n = dy.shape[0]
    cdef int c = dy.shape[1]
    cdef int h2 = dy.shape[2]
    cdef int w2 = dy.shape[3]
    cdef int i, ci, oy, ox, t
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    with nogil:
        for i in range(n):
            for ci in range(c):
                for oy in range(h2):
                    for ox in range(w2):
                        t = idx[i, ci, oy, ox]
                        dx[i, ci, 2 * oy + (t >> 1), 2 * ox + (t & 1)] = \
                            dy[i, ci, oy, ox]
    return dx_arr


def bilinear_forward(real[:, :, :, ::1] x,
                     cnp.intp_t[::1] y0, cnp.intp_t[::1] y1, real[::1] wy,
                     cnp.intp_t[::1] x0, cnp.intp_t[::1] x1, real[::1] wx):
    cdef int n = x.shape[0]
    cdef int c = x.shape[1]
    cdef int oh = y0.shape[0]
    cdef int ow = x0.shape[0]
    cdef int i, ci, oy, ox
    cdef real fy, fx
    cdef real one = 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for ci in range(c):
                for oy in range(oh):
                    fy = wy[oy]
                    for ox in range(ow):
                        fx = wx[ox]
                        out[i, ci, oy, ox] = (
                            (one - fy) * (one - fx) * x[i, ci, y0[oy], x0[ox]]
                            + (one - fy) * fx * x[i, ci, y0[oy], x1[ox]]
                            + fy * (one - fx) * x[i, ci, y1[oy], x0[ox]]
                            + fy * fx * x[i, ci, y1[oy], x1[ox]])
    return out_arr


def bilinear_backward(real[:, :, :, ::1] dy,
                      cnp.intp_t[::1] y0, cnp.intp_t[::1] y1, real[::1] wy,
                      cnp.intp_t[::1] x0, cnp.intp_t[::1] x1, real[::1] wx,
                      int h, int w):
    cdef int n = dy.shape[0]
    cdef int c = dy.shape[1]
    cdef int oh = y0.shape[0]
    cdef int ow = x0.shape[0]
    cdef int i, ci, oy, ox
    cdef real fy, fx, g
    cdef real one = 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    # four corner-major passes so the accumulation order (and therefore the
    # floating-point rounding) matches the vectorized numpy fallback exactly
    with nogil:
        for i in range(n):
            for ci in range(c):
                for oy in range(oh):
                    fy = wy[oy]
                    for ox in range(ow):
                        dx[i, ci, y0[oy], x0[ox]] += (one - fy) * (one - wx[ox]) * dy[i, ci, oy, ox]
                for oy in range(oh):
                    fy = wy[oy]
                    for ox in range(ow):
                        dx[i, ci, y0[oy], x1[ox]] += (one - fy) * wx[ox] * dy[i, ci, oy, ox]
                for oy in range(oh):
                    fy = wy[oy]
                    for ox in range(ow):
                        dx[i, ci, y1[oy], x0[ox]] += fy * (one - wx[ox]) * dy[i, ci, oy, ox]
                for oy in range(oh):
                    fy = wy[oy]
                    for ox in range(ow):
                        dx[i, ci, y1[oy], x1[ox]] += fy * wx[ox] * dy[i, ci, oy, ox]
    return dx_arr
