"""Backend selection for the hot kernels.

By default the numba-jitted kernels are used when numba imports
cleanly. Set ``PARTBODY_NUMBA=0`` to force the pure-numpy fallback
(useful for debugging and for the backend benchmark).
"""
from __future__ import annotations

import os

from . import np_backend

_flag = os.environ.get("PARTBODY_NUMBA", "1").strip().lower()

if _flag in ("0", "false", "off", "no"):
    _impl = np_backend
else:
    try:
        from . import nb_backend as _impl
    except ImportError:
        _impl = np_backend

pairwise_iou = _impl.pairwise_iou
nms_keep = _impl.nms_keep
BACKEND = _impl.BACKEND


def backend_name() -> str:
    """Name of the active kernel backend ("numba" or "numpy")."""
    return BACKEND
