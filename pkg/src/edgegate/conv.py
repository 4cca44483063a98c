"""Volumetric convolution and trilinear resampling.

conv3d is cross-correlation (no kernel flip), computed as im2col plus a
single matmul so the heavy lifting stays inside BLAS.  The input
gradient is computed as a stride-1 correlation of the zero-dilated
output gradient with the flipped, channel-transposed kernel, which
reuses the same im2col path instead of a slow scatter.

The patch matrix from the forward pass is kept alive in the backward
closure: recomputing it would roughly double backward time, and at the
volume sizes this library targets the memory cost is modest.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, accumulate_grad, record


def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    padded = extent + 2 * padding
    if padded < k:
        raise ShapeError(f"kernel {k} exceeds padded extent {padded}")
    return (padded - k) // stride + 1


def _im2col(xp: np.ndarray, kernel: tuple[int, int, int], stride: int):
    """Padded volume [N,C,Dp,Hp,Wp] -> patch matrix [N*P, C*k^3]."""
    view = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    view = view[:, :, ::stride, ::stride, ::stride]
    n, c, do, ho, wo = view.shape[:5]
    cols = view.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(
        n * do * ho * wo, c * kernel[0] * kernel[1] * kernel[2]
    )
    return np.ascontiguousarray(cols), (do, ho, wo)


def conv3d_raw(
    x: np.ndarray,
    w: np.ndarray,
    b: Optional[np.ndarray],
    stride: int = 1,
    padding: int = 0,
    return_cols: bool = False,
):
    """Plain numpy cross-correlation, shared by the op and non-differentiable users."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape} and {w.shape}")
    n, c = x.shape[:2]
    k_out, c_w, kd, kh, kw = w.shape
    if c_w != c:
        raise ShapeError(f"weight expects {c_w} input channels, input has {c}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}")
    if b is not None and b.shape != (k_out,):
        raise ShapeError(f"bias must have shape [{k_out}], got {b.shape}")
    out_spatial = tuple(
        _conv_out_extent(x.shape[2 + i], (kd, kh, kw)[i], stride, padding) for i in range(3)
    )
    xp = x
    if padding > 0:
        xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    cols, (do, ho, wo) = _im2col(xp, (kd, kh, kw), stride)
    y = cols @ w.reshape(k_out, -1).T
    if b is not None:
        y += b
    y = np.ascontiguousarray(y.reshape(n, do, ho, wo, k_out).transpose(0, 4, 1, 2, 3))
    assert (do, ho, wo) == out_spatial
    if return_cols:
        return y, cols
    return y


def _grad_input(
    g: np.ndarray,
    w: np.ndarray,
    in_spatial: tuple[int, int, int],
    stride: int,
    padding: int,
) -> np.ndarray:
    """Transposed convolution of the output gradient back to input shape."""
    n, k_out = g.shape[:2]
    kd, kh, kw = w.shape[2:]
    kernel = (kd, kh, kw)
    # remainder = padded cells past the last window; they receive zero gradient
    rem = tuple((in_spatial[i] + 2 * padding - kernel[i]) % stride for i in range(3))
    dilated = tuple((g.shape[2 + i] - 1) * stride + 1 for i in range(3))
    canvas_spatial = tuple(
        dilated[i] + 2 * (kernel[i] - 1) + rem[i] for i in range(3)
    )
    canvas = np.zeros((n, k_out) + canvas_spatial, dtype=np.float64)
    canvas[
        :,
        :,
        kd - 1 : kd - 1 + dilated[0] : stride,
        kh - 1 : kh - 1 + dilated[1] : stride,
        kw - 1 : kw - 1 + dilated[2] : stride,
    ] = g
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    gx_pad = conv3d_raw(canvas, w_t, None, stride=1, padding=0)
    if padding == 0:
        return gx_pad
    sl = tuple(slice(padding, padding + in_spatial[i]) for i in range(3))
    return np.ascontiguousarray(gx_pad[(slice(None), slice(None)) + sl])


def conv3d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    y, cols = conv3d_raw(
        x.data, w.data, None if b is None else b.data, stride, padding, return_cols=True
    )
    k_out = w.shape[0]
    in_spatial = x.shape[2:]
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g: np.ndarray) -> None:
        if b is not None:
            accumulate_grad(b, g.sum(axis=(0, 2, 3, 4)), fresh=True)
        if w.requires_grad:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1).reshape(-1, k_out))
            accumulate_grad(w, (g2.T @ cols).reshape(w.shape), fresh=True)
        if x.requires_grad:
            accumulate_grad(x, _grad_input(g, w.data, in_spatial, stride, padding), fresh=True)

    return record("conv3d", inputs, y, bw)


# ---------------------------------------------------------------------------
# trilinear upsampling (half-pixel centers, clamped borders)
# ---------------------------------------------------------------------------


def _axis_maps(extent: int, scale: int):
    j = np.arange(extent * scale, dtype=np.float64)
    src = (j + 0.5) / scale - 0.5
    base = np.floor(src)
    frac = src - base
    i0 = np.clip(base, 0, extent - 1).astype(np.intp)
    i1 = np.clip(base + 1, 0, extent - 1).astype(np.intp)
    return i0, i1, frac


def _interp_axis(x: np.ndarray, axis: int, i0, i1, frac) -> np.ndarray:
    shape = [1] * x.ndim
    shape[axis] = -1
    f = frac.reshape(shape)
    return np.take(x, i0, axis=axis) * (1.0 - f) + np.take(x, i1, axis=axis) * f


def _interp_axis_transpose(g: np.ndarray, axis: int, i0, i1, frac, extent_in: int) -> np.ndarray:
    out_shape = list(g.shape)
    out_shape[axis] = extent_in
    gx = np.zeros(out_shape, dtype=np.float64)
    gm = np.moveaxis(g, axis, 0)
    gxm = np.moveaxis(gx, axis, 0)
    for j in range(g.shape[axis]):
        f = frac[j]
        gxm[i0[j]] += (1.0 - f) * gm[j]
        if f > 0.0:
            gxm[i1[j]] += f * gm[j]
    return gx


def trilinear_upsample(x: Tensor, scale: int) -> Tensor:
    """Upsample [N,C,D,H,W] by an integer factor along each spatial axis."""
    if x.ndim != 5:
        raise ShapeError(f"trilinear_upsample expects 5-d input, got {x.shape}")
    if int(scale) != scale or scale < 1:
        raise ShapeError(f"scale must be a positive integer, got {scale}")
    scale = int(scale)
    if any(e < 1 for e in x.shape[2:]):
        raise ShapeError(f"zero-extent spatial axis in {x.shape}")
    maps = [_axis_maps(x.shape[2 + i], scale) for i in range(3)]
    y = x.data
    for i in range(3):
        y = _interp_axis(y, 2 + i, *maps[i])

    def bw(g: np.ndarray) -> None:
        gx = g
        for i in (2, 1, 0):
            gx = _interp_axis_transpose(gx, 2 + i, *maps[i], x.shape[2 + i])
        accumulate_grad(x, gx, fresh=True)

    return record("trilinear_upsample", (x,), y, bw)
