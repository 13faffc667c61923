"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension (``_fast``, built from Cython) is used when it can be
imported.  Set ``W2VBERT_KERNELS=python`` to force the numpy fallback.
"""

import os

from . import _reference

BACKEND = "python"
_impl = _reference

if os.environ.get("W2VBERT_KERNELS", "").lower() != "python":
    try:
        from . import _fast as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _reference

im2col = _impl.im2col
col2im = _impl.col2im
depthwise_conv1d_forward = _impl.depthwise_conv1d_forward
depthwise_conv1d_backward = _impl.depthwise_conv1d_backward
scatter_add_rows = _impl.scatter_add_rows

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "depthwise_conv1d_forward",
    "depthwise_conv1d_backward",
    "scatter_add_rows",
]
