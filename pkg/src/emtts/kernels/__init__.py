"""Hot-loop kernels: compiled extension when available, numpy otherwise.

Set ``EMTTS_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("EMTTS_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

emt_step = _impl.emt_step
lu_solve = _impl.lu_solve
ring_push = _impl.ring_push

__all__ = ["BACKEND", "emt_step", "lu_solve", "ring_push", "get_backend"]


def get_backend(name=None):
    """Return the kernel module by name (``"cython"``/``"python"``), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
