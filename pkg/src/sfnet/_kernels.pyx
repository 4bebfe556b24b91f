# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: im2col/col2im, max pooling and the radix-2 FFT.

Signatures mirror :mod:`sfnet._kernels_py` exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, M_PI
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real_t:
    float
    double


def _im2col(real_t[:, :, :, ::1] xp, real_t[:, :, ::1] cols,
            int kh, int kw, int stride, int out_h, int out_w):
    cdef Py_ssize_t n, c, i, j, oy, ox, row
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef real_t* dst
    cdef real_t* src
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(out_h):
                            dst = &cols[n, row, oy * out_w]
                            src = &xp[n, c, oy * stride + i, j]
                            if stride == 1:
                                memcpy(dst, src, out_w * sizeof(real_t))
                            else:
                                for ox in range(out_w):
                                    dst[ox] = src[ox * stride]


def im2col(xp, int kh, int kw, int stride, int out_h, int out_w):
    xp = np.ascontiguousarray(xp)
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c * kh * kw, out_h * out_w), dtype=xp.dtype)
    _im2col(xp, cols, kh, kw, stride, out_h, out_w)
    return cols


def _col2im(real_t[:, :, ::1] cols, real_t[:, :, :, ::1] xp,
            int kh, int kw, int stride, int out_h, int out_w):
    cdef Py_ssize_t n, c, i, j, oy, ox, row
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef real_t* src
    cdef real_t* dst
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(out_h):
                            src = &cols[n, row, oy * out_w]
                            dst = &xp[n, c, oy * stride + i, j]
                            if stride == 1:
                                for ox in range(out_w):
                                    dst[ox] += src[ox]
                            else:
                                for ox in range(out_w):
                                    dst[ox * stride] += src[ox]


def col2im(cols, int n, int c, int hp, int wp, int kh, int kw, int stride, int out_h, int out_w):
    cols = np.ascontiguousarray(cols)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    _col2im(cols, xp, kh, kw, stride, out_h, out_w)
    return xp


def _maxpool_fwd(real_t[:, :, :, ::1] x, real_t[:, :, :, ::1] out,
                 cnp.int64_t[:, :, :, ::1] arg, int k, int s):
    cdef Py_ssize_t n, c, oy, ox, i, j, best_idx, y, xx, W = x.shape[3]
    cdef real_t best, v
    with nogil:
        for n in range(x.shape[0]):
            for c in range(x.shape[1]):
                for oy in range(out.shape[2]):
                    for ox in range(out.shape[3]):
                        y = oy * s
                        xx = ox * s
                        best = x[n, c, y, xx]
                        best_idx = y * W + xx
                        for i in range(k):
                            for j in range(k):
                                v = x[n, c, y + i, xx + j]
                                # strict > keeps the first row-major maximum
                                if v > best:
                                    best = v
                                    best_idx = (y + i) * W + xx + j
                        out[n, c, oy, ox] = best
                        arg[n, c, oy, ox] = best_idx


def maxpool_forward(x, int k, int s):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out_h = (h - k) // s + 1
    out_w = (w - k) // s + 1
    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    arg = np.empty((n, c, out_h, out_w), dtype=np.int64)
    _maxpool_fwd(x, out, arg, k, s)
    return out, arg


def _maxpool_bwd(real_t[:, :, :, ::1] g, cnp.int64_t[:, :, :, ::1] arg, real_t[:, :, ::1] grad):
    cdef Py_ssize_t n, c, oy, ox, C = g.shape[1]
    with nogil:
        for n in range(g.shape[0]):
            for c in range(C):
                for oy in range(g.shape[2]):
                    for ox in range(g.shape[3]):
                        grad[n * C + c, 0, arg[n, c, oy, ox]] += g[n, c, oy, ox]


def maxpool_backward(grad_out, argmax, int h, int w):
    grad_out = np.ascontiguousarray(grad_out)
    n, c = grad_out.shape[0], grad_out.shape[1]
    grad = np.zeros((n * c, 1, h * w), dtype=grad_out.dtype)
    _maxpool_bwd(grad_out, np.ascontiguousarray(argmax, dtype=np.int64), grad)
    return grad.reshape(n, c, h, w)


def bit_reverse_indices(Py_ssize_t n):
    cdef Py_ssize_t i, r, b, v
    cdef int bits = 0
    while (1 << bits) < n:
        bits += 1
    rev = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] rv = rev
    for i in range(n):
        v = i
        r = 0
        for b in range(bits):
            r = (r << 1) | (v & 1)
            v >>= 1
        rv[i] = r
    return rev


def twiddles(Py_ssize_t n, bint inverse=False):
    cdef Py_ssize_t k
    cdef double ang, sign = 1.0 if inverse else -1.0
    tw = np.empty(n // 2, dtype=np.complex128)
    cdef double complex[::1] t = tw
    for k in range(n // 2):
        if k == 0:
            t[k] = 1.0
        elif 4 * k == n:
            t[k] = complex(0.0, sign)
        else:
            ang = 2.0 * M_PI * k / n
            t[k] = cos(ang) + sign * 1j * sin(ang)
    return tw


def _fft_rows(double complex[:, ::1] z, double complex[::1] w, cnp.int64_t[::1] rev):
    cdef Py_ssize_t rows = z.shape[0], n = z.shape[1]
    cdef Py_ssize_t r, i, j, start, k, size, half, step
    cdef double complex tmp, t, u
    with nogil:
        for r in range(rows):
            for i in range(n):
                j = rev[i]
                if j > i:
                    tmp = z[r, i]
                    z[r, i] = z[r, j]
                    z[r, j] = tmp
            size = 2
            while size <= n:
                half = size // 2
                step = n // size
                start = 0
                while start < n:
                    for k in range(half):
                        t = w[k * step] * z[r, start + k + half]
                        u = z[r, start + k]
                        z[r, start + k] = u + t
                        z[r, start + k + half] = u - t
                    start += size
                size *= 2


def fft_lastaxis(z, bint inverse=False):
    # no negative indexing: wraparound is disabled module-wide
    nd = z.ndim
    n = z.shape[nd - 1]
    lead = z.shape[:nd - 1]
    out = np.array(z, dtype=np.complex128, order="C").reshape(-1, n)
    _fft_rows(out, twiddles(n, inverse), bit_reverse_indices(n))
    return out.reshape(*lead, n)


def _fft_blocks(double complex[:, :, ::1] z, double complex[::1] w, cnp.int64_t[::1] rev):
    # transform along the middle axis; butterflies sweep whole inner rows
    cdef Py_ssize_t outer = z.shape[0], n = z.shape[1], inner = z.shape[2]
    cdef Py_ssize_t o, i, j, m, start, k, size, half, step
    cdef double complex tmp, t, u, tw
    with nogil:
        for o in range(outer):
            for i in range(n):
                j = rev[i]
                if j > i:
                    for m in range(inner):
                        tmp = z[o, i, m]
                        z[o, i, m] = z[o, j, m]
                        z[o, j, m] = tmp
            size = 2
            while size <= n:
                half = size // 2
                step = n // size
                start = 0
                while start < n:
                    for k in range(half):
                        tw = w[k * step]
                        for m in range(inner):
                            t = tw * z[o, start + k + half, m]
                            u = z[o, start + k, m]
                            z[o, start + k, m] = u + t
                            z[o, start + k + half, m] = u - t
                    start += size
                size *= 2


def fft_axis(z, int axis, bint inverse=False):
    """Unnormalized radix-2 transform of a complex array along ``axis``."""
    nd = z.ndim
    if axis < 0:
        axis += nd
    shape = z.shape
    n = shape[axis]
    outer = 1
    for a in range(axis):
        outer *= shape[a]
    inner = 1
    for a in range(axis + 1, nd):
        inner *= shape[a]
    out = np.array(z, dtype=np.complex128, order="C")
    w = twiddles(n, inverse)
    rev = bit_reverse_indices(n)
    if inner == 1:
        _fft_rows(out.reshape(outer, n), w, rev)
    else:
        _fft_blocks(out.reshape(outer, n, inner), w, rev)
    return out
