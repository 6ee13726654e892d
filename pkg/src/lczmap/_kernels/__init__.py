"""Hot inner loops shared by the network, the forest and the map renderer.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
fallback with identical outputs. The numba path is used when numba imports
cleanly, unless ``LCZMAP_DISABLE_NUMBA`` is set to a truthy value before
:mod:`lczmap` is first imported.
"""

import os

from . import _numpy as numpy_backend

_FLAG = os.environ.get("LCZMAP_DISABLE_NUMBA", "").strip().lower()
DISABLED = _FLAG not in ("", "0", "false", "no")

numba_backend = None
if not DISABLED:
    try:
        from . import _numba as numba_backend
    except ImportError:  # pragma: no cover - numba is a declared dependency
        numba_backend = None

backend = numba_backend if numba_backend is not None else numpy_backend
BACKEND = "numba" if backend is numba_backend else "numpy"

im2col = backend.im2col
maxpool2_forward = backend.maxpool2_forward
maxpool2_backward = backend.maxpool2_backward
split_scan = backend.split_scan
apply_tree = backend.apply_tree

__all__ = [
    "BACKEND",
    "apply_tree",
    "im2col",
    "maxpool2_backward",
    "maxpool2_forward",
    "numba_backend",
    "numpy_backend",
    "split_scan",
]
