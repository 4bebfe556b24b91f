"""Pure numpy implementations of the hot kernels.

Every function here has a twin with an identical signature in the compiled
``_kernels`` extension; :mod:`sfnet.kernels` picks one at import time.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, kh, kw, stride, out_h, out_w):
    """Unfold a padded ``(N, C, Hp, Wp)`` batch into ``(N, C*kh*kw, out_h*out_w)`` columns."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, kh, kw, out_h, out_w),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(n, c * kh * kw, out_h * out_w)


def col2im(cols, n, c, hp, wp, kh, kw, stride, out_h, out_w):
    """Scatter-add columns back into a zero padded ``(N, C, Hp, Wp)`` buffer."""
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, out_h, out_w)
    h_end = stride * (out_h - 1) + 1
    w_end = stride * (out_w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + h_end:stride, j:j + w_end:stride] += cols6[:, :, i, j]
    return xp


def maxpool_forward(x, k, s):
    """Window maxima and the flat ``H*W`` index of the first maximal element."""
    n, c, h, w = x.shape
    out_h = (h - k) // s + 1
    out_w = (w - k) // s + 1
    sn, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(n, c, out_h, out_w, k, k),
        strides=(sn, sc, sh * s, sw * s, sh, sw),
        writeable=False,
    ).reshape(n, c, out_h, out_w, k * k)
    local = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    rows = np.arange(out_h)[:, None] * s + local // k
    cols = np.arange(out_w)[None, :] * s + local % k
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(grad_out, argmax, h, w):
    n, c = grad_out.shape[:2]
    grad = np.zeros((n * c, h * w), dtype=grad_out.dtype)
    flat_idx = argmax.reshape(n * c, -1)
    flat_g = grad_out.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), flat_idx.shape[1])
    np.add.at(grad, (rows, flat_idx.ravel()), flat_g.ravel())
    return grad.reshape(n, c, h, w)


def bit_reverse_indices(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def twiddles(n, inverse=False):
    """``exp(-+2*pi*i*k/n)`` for ``k < n/2`` with the quarter-turn points exact."""
    k = np.arange(n // 2)
    ang = 2.0 * np.pi * k / n
    re = np.cos(ang)
    im = -np.sin(ang)
    # exact values keep self-conjugate bins of real inputs exactly real
    re[k == 0] = 1.0
    im[k == 0] = 0.0
    if n % 4 == 0:
        re[k == n // 4] = 0.0
        im[k == n // 4] = -1.0
    if inverse:
        im = -im
    return re + 1j * im


def fft_lastaxis(z, inverse=False):
    """Unnormalized iterative radix-2 DIT transform along the last axis.

    ``z`` must be complex128 with a power-of-two last extent. A new array is
    returned; the input is not modified.
    """
    n = z.shape[-1]
    lead = z.shape[:-1]
    out = z[..., bit_reverse_indices(n)].reshape(-1, n)
    w_full = twiddles(n, inverse)
    size = 2
    while size <= n:
        half = size // 2
        w = w_full[:: n // size][:half]
        blocks = out.reshape(out.shape[0], n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * w
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(-1, n)
        size *= 2
    return out.reshape(*lead, n)


def fft_axis(z, axis, inverse=False):
    """Unnormalized radix-2 transform of a complex array along ``axis``."""
    moved = np.ascontiguousarray(np.moveaxis(np.asarray(z, dtype=np.complex128), axis, -1))
    return np.ascontiguousarray(np.moveaxis(fft_lastaxis(moved, inverse), -1, axis))
