"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``POTMFG_BACKEND=python`` is set, the numpy fallback
is used.  ``BACKEND`` names the active implementation.
"""

from __future__ import annotations

import os

from . import _pykernels

_impl = _pykernels
BACKEND = "python"

if os.environ.get("POTMFG_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels

phi_value = _impl.phi_value
interp_points = _impl.interp_points
hjb_backward = _impl.hjb_backward
linear_backward = _impl.linear_backward
simulate_chunk = _impl.simulate_chunk

__all__ = ["BACKEND", "phi_value", "interp_points", "hjb_backward", "linear_backward", "simulate_chunk"]
