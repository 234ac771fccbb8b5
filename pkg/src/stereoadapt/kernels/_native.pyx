# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled CPU kernels for horizontal bilinear warping and 1-D correlation.

Both kernels come with explicit backward passes so they can be wrapped in
autograd functions.  Sampling outside [0, W-1] contributes zero (zero
padding), matching the pure-torch reference implementation bit-for-bit in
structure (floating point order may differ in the last ulp).
"""

import numpy as np

cimport cython
from libc.math cimport floor

ctypedef fused real:
    float
    double


def warp_forward(real[:, :, ::1] feat, real[:, ::1] disp, real[:, :, ::1] out):
    """out[c, y, x] = bilinear sample of feat at (y, x - disp[y, x]), zero padded."""
    cdef Py_ssize_t C = feat.shape[0], H = feat.shape[1], W = feat.shape[2]
    cdef Py_ssize_t c, y, x
    cdef double xs, a
    cdef Py_ssize_t x0, x1
    cdef real v0, v1
    for y in range(H):
        for x in range(W):
            xs = <double> x - <double> disp[y, x]
            x0 = <Py_ssize_t> floor(xs)
            x1 = x0 + 1
            a = xs - <double> x0
            for c in range(C):
                v0 = feat[c, y, x0] if 0 <= x0 < W else <real> 0
                v1 = feat[c, y, x1] if 0 <= x1 < W else <real> 0
                out[c, y, x] = <real> ((1.0 - a) * v0 + a * v1)


def warp_backward(real[:, :, ::1] grad_out, real[:, :, ::1] feat,
                  real[:, ::1] disp, real[:, :, ::1] grad_feat,
                  real[:, ::1] grad_disp):
    """Accumulate gradients of warp_forward into grad_feat and grad_disp.

    d(out)/d(disp) = -(v1 - v0) with out-of-range samples treated as the
    constant zero, the exact derivative of the zero-padded interpolant.
    """
    cdef Py_ssize_t C = feat.shape[0], H = feat.shape[1], W = feat.shape[2]
    cdef Py_ssize_t c, y, x
    cdef double xs, a, gd
    cdef Py_ssize_t x0, x1
    cdef real v0, v1, g
    for y in range(H):
        for x in range(W):
            xs = <double> x - <double> disp[y, x]
            x0 = <Py_ssize_t> floor(xs)
            x1 = x0 + 1
            a = xs - <double> x0
            gd = 0.0
            for c in range(C):
                g = grad_out[c, y, x]
                v0 = feat[c, y, x0] if 0 <= x0 < W else <real> 0
                v1 = feat[c, y, x1] if 0 <= x1 < W else <real> 0
                if 0 <= x0 < W:
                    grad_feat[c, y, x0] += <real> ((1.0 - a) * g)
                if 0 <= x1 < W:
                    grad_feat[c, y, x1] += <real> (a * g)
                gd += <double> g * (<double> v1 - <double> v0)
            grad_disp[y, x] -= <real> gd


def corr_forward(real[:, :, ::1] left, real[:, :, ::1] right, int max_disp,
                 real[:, :, ::1] out):
    """out[d, y, x] = mean_c left[c, y, x] * right[c, y, x - d], zero for x < d.

    Channel-outer loop order keeps every access streaming over contiguous
    [H, W] planes.
    """
    cdef Py_ssize_t C = left.shape[0], H = left.shape[1], W = left.shape[2]
    cdef Py_ssize_t c, y, x, d
    cdef real inv_c = <real> (1.0 / <double> C)
    out[:, :, :] = <real> 0
    for c in range(C):
        for d in range(max_disp + 1):
            for y in range(H):
                for x in range(d, W):
                    out[d, y, x] += left[c, y, x] * right[c, y, x - d]
    for d in range(max_disp + 1):
        for y in range(H):
            for x in range(W):
                out[d, y, x] *= inv_c


def corr_backward(real[:, :, ::1] grad_out, real[:, :, ::1] left,
                  real[:, :, ::1] right, real[:, :, ::1] grad_left,
                  real[:, :, ::1] grad_right):
    cdef Py_ssize_t D = grad_out.shape[0], C = left.shape[0]
    cdef Py_ssize_t H = left.shape[1], W = left.shape[2]
    cdef Py_ssize_t c, y, x, d
    cdef real g, inv_c = <real> (1.0 / <double> C)
    for c in range(C):
        for d in range(D):
            for y in range(H):
                for x in range(d, W):
                    g = grad_out[d, y, x] * inv_c
                    grad_left[c, y, x] += g * right[c, y, x - d]
                    grad_right[c, y, x - d] += g * left[c, y, x]
