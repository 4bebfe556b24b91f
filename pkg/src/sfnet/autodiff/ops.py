"""Convolution, pooling and normalisation ops on NCHW tensors."""

from __future__ import annotations

from typing import Optional

import numpy as np

from sfnet import kernels
from sfnet.autodiff.tensor import ShapeError, Tensor, record


def _out_extent(size: int, k: int, stride: int, padding: int, what: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"{what}: window {k} exceeds padded extent {size + 2 * padding}")
    # floor semantics: a trailing partial window is dropped
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with full backward."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and KCkk weight")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cw}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")
    out_h = _out_extent(h, kh, stride, padding, "conv2d")
    out_w = _out_extent(w, kw, stride, padding, "conv2d")
    hp, wp = h + 2 * padding, w + 2 * padding

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = kernels.im2col(xp, kh, kw, stride, out_h, out_w)
    w2 = weight.data.reshape(k, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, k, out_h, out_w)

    def backward(g):
        g2 = g.reshape(n, k, out_h * out_w)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gxp = kernels.col2im(gcols, n, c, hp, wp, kh, kw, stride, out_h, out_w)
                gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w])
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", out, parents, backward)


def maxpool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Per-window maximum; the gradient goes to the first row-major maximum."""
    stride = stride or window
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} exceeds input {h}x{w}")
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(x.data), window, stride)
    return record("maxpool2d", out, (x,), lambda g: (kernels.maxpool_backward(g, arg, h, w),))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over (N, H, W) per channel.

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place (unbiased variance, as is customary).
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    dt = xd.dtype
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = ((xd - mu.astype(dt)[None, :, None, None]) ** 2).mean(axis=(0, 2, 3), dtype=np.float64)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    mu = mu.astype(dt)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                m = n * h * w
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv_std[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, gg, gbeta

    return record("batchnorm2d", out, (x, gamma, beta), backward)


def pool_global(x: Tensor, kind: str = "avg", axes: str = "spatial") -> Tensor:
    """Global average/max pooling over the spatial plane or the channel axis.

    ``spatial`` gives ``N×C×1×1``, ``channel`` gives ``N×1×H×W``.
    """
    if x.ndim != 4:
        raise ShapeError("pool_global expects a 4-D tensor")
    if axes == "spatial":
        red = (2, 3)
    elif axes == "channel":
        red = (1,)
    else:
        raise ValueError(f"axes must be 'spatial' or 'channel', got {axes!r}")
    xd = x.data
    if kind == "avg":
        count = int(np.prod([x.shape[a] for a in red]))
        out = xd.mean(axis=red, keepdims=True, dtype=np.float64).astype(xd.dtype)
        inv = xd.dtype.type(1.0 / count)
        return record("avgpool_global", out, (x,),
                      lambda g: (np.broadcast_to(g * inv, x.shape).copy(),))
    if kind != "max":
        raise ValueError(f"kind must be 'avg' or 'max', got {kind!r}")

    n, c, h, w = x.shape
    if axes == "spatial":
        flat = xd.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

        def backward(g):
            gx = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
            return (gx.reshape(x.shape),)
    else:
        idx = xd.argmax(axis=1)[:, None]
        out = np.take_along_axis(xd, idx, axis=1)

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)

    return record("maxpool_global", np.ascontiguousarray(out), (x,), backward)
