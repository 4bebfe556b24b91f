"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when
``SFNET_PURE_PYTHON=1`` is set) the numpy fallback is used. Both expose the
same functions, so callers only ever import from here.
"""

import logging
import os

logger = logging.getLogger(__name__)

if os.environ.get("SFNET_PURE_PYTHON", "") not in ("", "0"):
    from sfnet import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from sfnet import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build
        logger.debug("compiled kernels unavailable, using numpy fallback")
        from sfnet import _kernels_py as _impl

        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
fft_lastaxis = _impl.fft_lastaxis
fft_axis = _impl.fft_axis
bit_reverse_indices = _impl.bit_reverse_indices
twiddles = _impl.twiddles

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "fft_lastaxis",
    "fft_axis",
    "bit_reverse_indices",
    "twiddles",
]
