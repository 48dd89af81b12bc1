"""Differentiable layers on channel x height x width feature maps."""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ContractError, ShapeError, Tensor, _make

__all__ = [
    "same_padding",
    "conv2d",
    "conv2d_transpose",
    "maxpool2x2",
    "linear",
    "concat_channels",
]


def same_padding(kh: int, kw: int) -> tuple[int, int, int, int]:
    """(top, bottom, left, right); odd totals put the extra row/column bottom/right."""
    th, tw = kh - 1, kw - 1
    return th // 2, th - th // 2, tw // 2, tw - tw // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "same",
           stride=(1, 1)) -> Tensor:
    """Cross-correlation of ``x`` (C_in, H, W) with ``weight`` (C_out, C_in, kh, kw)."""
    if tuple(stride) != (1, 1):
        raise ContractError("only stride (1, 1) is supported")
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected (C,H,W) input and 4-d weight, got {x.shape} and {weight.shape}")
    C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels but weight {weight.shape} expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {O} output channels")
    if padding == "same":
        pads = same_padding(kh, kw)
    elif padding == "none":
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Ho = H + pads[0] + pads[1] - kh + 1
    Wo = W + pads[2] + pads[3] - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")

    X = x.data
    Wm = weight.data.reshape(O, C * kh * kw)
    pointwise = kh == 1 and kw == 1
    cols = X.reshape(C, H * W) if pointwise else kernels.im2col(X, kh, kw, *pads)
    out = Wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(O, Ho, Wo)

    def back(g):
        gm = g.reshape(O, Ho * Wo)
        dW = (gm @ cols.T).reshape(weight.shape)
        dcols = Wm.T @ gm
        dx = dcols.reshape(C, H, W) if pointwise else kernels.col2im(dcols, C, H, W, kh, kw, *pads)
        if bias is None:
            return dx, dW
        return dx, dW, gm.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transpose convolution with a 2x2 kernel; ``weight`` is (C_in, C_out, 2, 2).

    Kernel and stride coincide, so every input pixel stamps its own 2x2 block.
    """
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"conv2d_transpose: bad shapes {x.shape} and {weight.shape}")
    C, H, W = x.shape
    Cw, O = weight.shape[:2]
    if C != Cw:
        raise ShapeError(f"conv2d_transpose: input has {C} channels but weight {weight.shape} expects {Cw}")
    Xm = x.data.reshape(C, H * W)
    Wm = weight.data.reshape(C, O * 4)
    y = (Wm.T @ Xm).reshape(O, 2, 2, H, W).transpose(0, 3, 1, 4, 2).reshape(O, 2 * H, 2 * W)
    if bias is not None:
        y = y + bias.data[:, None, None]
    y = np.ascontiguousarray(y)

    def back(g):
        gm = g.reshape(O, H, 2, W, 2).transpose(0, 2, 4, 1, 3).reshape(O * 4, H * W)
        dx = (Wm @ gm).reshape(C, H, W)
        dW = (Xm @ gm.T).reshape(weight.shape)
        if bias is None:
            return dx, dW
        return dx, dW, g.sum(axis=(1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, back)


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties send the gradient to the first window element."""
    if x.ndim != 3:
        raise ShapeError(f"maxpool2x2 expects (C,H,W), got {x.shape}")
    C, H, W = x.shape
    if H % 2 or W % 2:
        raise ContractError(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    out, arg = kernels.maxpool2x2_forward(x.data)

    def back(g):
        return (kernels.maxpool2x2_backward(np.ascontiguousarray(g), arg, H, W),)

    return _make(out, (x,), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Column-wise affine map: ``weight @ x + bias`` for x of shape (in_dim, T)."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: weight {weight.shape} cannot act on input {x.shape}")
    X, Wt = x.data, weight.data
    out = Wt @ X
    if bias is not None:
        if bias.shape != (Wt.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {Wt.shape}")
        out += bias.data[:, None]

    def back(g):
        if bias is None:
            return Wt.T @ g, g @ X.T
        return Wt.T @ g, g @ X.T, g.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)


def concat_channels(*parts: Tensor) -> Tensor:
    """Stack feature maps along the channel axis, in argument order."""
    if not parts:
        raise ShapeError("concat_channels needs at least one input")
    ref = parts[0].shape
    for p in parts:
        if p.ndim != 3 or p.shape[1:] != ref[1:]:
            raise ShapeError(f"concat_channels: spatial mismatch {ref} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, back)
