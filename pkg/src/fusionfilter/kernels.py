"""Backend selection for the MLP hot loop.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. Set ``FUSIONFILTER_BACKEND=python`` to force the
fallback; ``FUSIONFILTER_BACKEND=cython`` makes a missing extension an error.
"""

import os

from . import _kernels_py

_forced = os.environ.get("FUSIONFILTER_BACKEND", "").strip().lower()

if _forced == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _kernels_py

BACKEND = _impl.BACKEND
mlp_forward = _impl.mlp_forward
mlp_backward = _impl.mlp_backward
adam_update = _impl.adam_update

__all__ = ["BACKEND", "mlp_forward", "mlp_backward", "adam_update", "_kernels_py"]
