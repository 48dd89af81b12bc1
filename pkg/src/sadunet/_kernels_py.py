"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Both backends accumulate in the same order, so results agree bitwise.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, pt, pb, pl, pr):
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    Ho, Wo = H + pt + pb - kh + 1, W + pl + pr - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # C, Ho, Wo, kh, kw
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * kh * kw, Ho * Wo)


def col2im(cols, C, H, W, kh, kw, pt, pb, pl, pr):
    Hp, Wp = H + pt + pb, W + pl + pr
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    c = cols.reshape(C, kh, kw, Ho, Wo)
    out = np.zeros((C, Hp, Wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + Ho, j:j + Wo] += c[:, i, j]
    return np.ascontiguousarray(out[:, pt:pt + H, pl:pl + W])


def maxpool2x2_forward(x):
    C, H, W = x.shape
    win = x.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)
    arg = win.argmax(axis=3).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=3)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2x2_backward(g, arg, H, W):
    C, Ho, Wo = g.shape
    buf = np.zeros((C, Ho, Wo, 4), dtype=g.dtype)
    np.put_along_axis(buf, arg[..., None].astype(np.intp), g[..., None], axis=3)
    return np.ascontiguousarray(buf.reshape(C, Ho, Wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H, W))
