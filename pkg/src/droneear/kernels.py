"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

Set DRONEEAR_PURE_PYTHON=1 to force the numpy backend (useful for
benchmarking and for debugging the extension).
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("DRONEEAR_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND

block_mean = _impl.block_mean
steered_power = _impl.steered_power
weighted_sq_distances = _impl.weighted_sq_distances
logamp_quantize = _impl.logamp_quantize
