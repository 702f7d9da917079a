"""Image operations on :class:`~unrolled_rpca.tensor.Tensor`: convolution,
2x2 average pooling and pixel shuffle.

All three accept ``(C, H, W)`` images or ``(N, C, H, W)`` batches; a video of
``T`` frames is convolved frame-wise by passing it as an ``N = T`` batch.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractViolation, Tensor


def _batched(x: Tensor, op: str):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ContractViolation(f"{op}: expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (N, C*k*k, ho*wo)
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: input of shape ``(C_in, H, W)`` or ``(N, C_in, H, W)``.
        weight: kernel of shape ``(C_out, C_in, k, k)`` with ``k`` odd.
        bias: optional ``(C_out,)`` offsets.
        stride: step between output samples.
        padding: zeros added on every spatial border.

    Returns:
        Tensor of shape ``(C_out, H', W')`` (or batched) with
        ``H' = (H + 2*padding - k) // stride + 1``.
    """
    xd, squeeze = _batched(x, "conv2d")
    w = weight.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ContractViolation(f"conv2d: kernel must be (C_out, C_in, k, k), got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if k % 2 == 0:
        raise ContractViolation(f"conv2d: kernel size must be odd, got {k}")
    if xd.shape[1] != c_in:
        raise ContractViolation(f"conv2d: input has {xd.shape[1]} channels, kernel expects {c_in}")
    if padding < 0 or stride < 1:
        raise ContractViolation(f"conv2d: invalid stride={stride} / padding={padding}")
    n, _, h, wd = xd.shape
    span_h, span_w = h + 2 * padding - k, wd + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ContractViolation(
            f"conv2d: (H={h}, W={wd}) with k={k}, stride={stride}, padding={padding} "
            "does not give an integral output size"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1
    if bias is not None and bias.shape != (c_out,):
        raise ContractViolation(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")

    if stride == 1:
        return _conv2d_flat(x, weight, bias, xd, squeeze, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.reshape(c_out, c_in * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, c_out, ho, wo)
    if squeeze:
        out = out[0]

    xp_shape = xp.shape

    def backward(g):
        g = g.reshape(n, c_out, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g)
            gxp = _col2im(gcols, xp_shape, k, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape).astype(w.dtype)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2), dtype=np.float64).astype(w.dtype)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


# Stride-1 convolution in a "flat" layout: the zero-padded image is stored
# row-major with row pitch Wp, so the window shifted by (i, j) is the
# contiguous slice starting at i*Wp + j.  Outputs are computed on ho rows of
# pitch Wp and the last k-1 columns of every row are discarded.


def _flatten_padded(xd: np.ndarray, padding: int, k: int) -> np.ndarray:
    n, c, h, w = xd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xf = np.zeros((n, c, hp * wp + k - 1), dtype=xd.dtype)
    xf[:, :, : hp * wp].reshape(n, c, hp, wp)[:, :, padding : padding + h, padding : padding + w] = xd
    return xf


def _flat_cols(xf: np.ndarray, k: int, wp: int, length: int) -> np.ndarray:
    # (N, C, len) -> (N, k*k*C, length), shift-major
    n, c = xf.shape[:2]
    cols = np.empty((n, k, k, c, length), dtype=xf.dtype)
    for i in range(k):
        for j in range(k):
            o = i * wp + j
            cols[:, i, j] = xf[:, :, o : o + length]
    return cols.reshape(n, k * k * c, length)


def _conv2d_flat(x, weight, bias, xd, squeeze, padding):
    w = weight.data
    c_out, c_in, k, _ = w.shape
    n, _, h, wd = xd.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho, wo = hp - k + 1, wp - k + 1
    length = ho * wp
    xf = _flatten_padded(xd, padding, k)
    # (C_out, k*k*C_in), shift-major to match _flat_cols
    wmat = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(c_out, k * k * c_in)
    cols = None
    if c_out < c_in and k > 1:
        # few outputs: multiply first, then add the k*k shifted partial maps
        wshift = np.ascontiguousarray(w.transpose(2, 3, 0, 1)).reshape(k * k * c_out, c_in)
        y = np.matmul(wshift, xf).reshape(n, k, k, c_out, -1)
        out = np.zeros((n, c_out, length), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                o = i * wp + j
                out += y[:, i, j, :, o : o + length]
    else:
        cols = _flat_cols(xf, k, wp, length)
        out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = np.ascontiguousarray(out.reshape(n, c_out, ho, wp)[..., :wo])
    if squeeze:
        out = out[0]

    def backward(g):
        gf = np.zeros((n, c_out, ho, wp), dtype=g.dtype)
        gf[..., :wo] = g.reshape(n, c_out, ho, wo)
        gf = gf.reshape(n, c_out, length)
        gx = gw = gb = None
        if x.requires_grad:
            z = np.matmul(wmat.T, gf).reshape(n, k, k, c_in, length)
            gxf = np.zeros(xf.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    o = i * wp + j
                    gxf[:, :, o : o + length] += z[:, i, j]
            gxp = gxf[:, :, : hp * wp].reshape(n, c_in, hp, wp)
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + wd])
            if squeeze:
                gx = gx[0]
        if weight.requires_grad:
            c = cols if cols is not None else _flat_cols(xf, k, wp, length)
            gw = np.tensordot(gf, c, axes=([0, 2], [0, 2])).reshape(c_out, k, k, c_in)
            gw = np.ascontiguousarray(gw.transpose(0, 3, 1, 2)).astype(w.dtype, copy=False)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(n, c_out, -1).sum(axis=(0, 2), dtype=np.float64).astype(w.dtype)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks of the last two axes."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ContractViolation(f"avg_pool2: spatial dims must be even, got H={h}, W={w}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1), dtype=np.float64).astype(x.dtype)

    def backward(g):
        g4 = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (g4 * np.asarray(0.25, dtype=g.dtype),)

    return Tensor._from_op(out, (x,), backward, "avg_pool2")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange ``(..., C*r*r, H, W)`` into ``(..., C, r*H, r*W)``.

    ``out[c, r*y + dy, r*x + dx] = in[c*r*r + dy*r + dx, y, x]``.
    """
    if x.ndim < 3:
        raise ContractViolation(f"pixel_shuffle: need at least 3 dims, got {x.shape}")
    *lead, cr, h, w = x.shape
    if r < 1 or cr % (r * r):
        raise ContractViolation(f"pixel_shuffle: {cr} channels not divisible by r^2 = {r * r}")
    c = cr // (r * r)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
    out = np.ascontiguousarray(x.data.reshape(*lead, c, r, r, h, w).transpose(perm)).reshape(*lead, c, r * h, r * w)
    inv = np.argsort(perm)

    def backward(g):
        g6 = g.reshape(*lead, c, h, r, w, r).transpose(inv)
        return (np.ascontiguousarray(g6).reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, "pixel_shuffle")


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle` on plain arrays."""
    *lead, c, hr, wr = x.shape
    h, w = hr // r, wr // r
    nl = len(lead)
    y = x.reshape(*lead, c, h, r, w, r)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    return np.ascontiguousarray(y.transpose(perm)).reshape(*lead, c * r * r, h, w)
