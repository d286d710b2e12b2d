"""Integration kernels: compiled Cython core with a pure-Python fallback.

The compiled backend is used when its extension module imported successfully;
set COMPORTAL_PURE_PYTHON=1 to force the fallback. Both backends implement the
same stepping semantics (see `_pykernels` for the reference formulation).
"""
import os

from . import _pykernels
from .pack import FlatPack, build_flat_pack

integrate_callable = _pykernels.integrate_callable
structured_rhs = _pykernels.structured_rhs

if os.environ.get("COMPORTAL_PURE_PYTHON") == "1":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND
integrate_structured = _impl.integrate_structured
eval_program = _impl.eval_program

__all__ = ["BACKEND", "FlatPack", "build_flat_pack", "eval_program",
           "integrate_callable", "integrate_structured", "structured_rhs"]
