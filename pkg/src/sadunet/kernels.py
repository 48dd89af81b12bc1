"""Backend selection for the hot convolution/pooling kernels.

The compiled extension is used when it imports; set ``SADUNET_PURE_PYTHON=1``
to force the numpy fallback.
"""

import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("SADUNET_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")

_backend = _compiled if _compiled is not None else _kernels_py
BACKEND = "compiled" if _compiled is not None else "python"


def use_backend(name: str) -> None:
    """Switch backends at runtime ("compiled" or "python")."""
    global _backend, BACKEND
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        _backend = _compiled
    elif name == "python":
        _backend = _kernels_py
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def compiled_available() -> bool:
    return _compiled is not None


def im2col(x, kh, kw, pt, pb, pl, pr):
    return _backend.im2col(x, kh, kw, pt, pb, pl, pr)


def col2im(cols, C, H, W, kh, kw, pt, pb, pl, pr):
    return _backend.col2im(cols, C, H, W, kh, kw, pt, pb, pl, pr)


def maxpool2x2_forward(x):
    return _backend.maxpool2x2_forward(x)


def maxpool2x2_backward(g, arg, H, W):
    return _backend.maxpool2x2_backward(g, arg, H, W)
