"""Geometry kernels: ray casting, point membership and depth carving.

The compiled extension is used when it has been built; otherwise the numpy
implementation is selected. Setting ``SEMOCC_PURE_PYTHON=1`` forces the
fallback.
"""
import os

from . import _geom_py

KIND_BOX = _geom_py.KIND_BOX
KIND_CYLINDER = _geom_py.KIND_CYLINDER

_compiled = None
if os.environ.get("SEMOCC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _geom as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _geom_py
BACKEND = "cython" if _compiled is not None else "python"

raycast = _impl.raycast
inside = _impl.inside
carve = _impl.carve


def implementations():
    """Mapping of available backend name to kernel module."""
    out = {"python": _geom_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
