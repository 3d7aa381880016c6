"""Hot-loop kernels, compiled when available.

The Cython extension ``fkge._core`` is used if it was built; otherwise the
numpy versions in ``fkge._core_py`` are used. Set ``FKGE_PURE_PYTHON=1`` to
force the fallback. Both backends implement the same arithmetic, but
floating-point summation order differs, so results agree to rounding error
rather than bit for bit.
"""
import os

from . import _core_py

BACKEND = "python"
if os.environ.get("FKGE_PURE_PYTHON") != "1":
    try:
        from . import _core as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _core_py
else:
    _impl = _core_py

transe_sgd_epoch = _impl.transe_sgd_epoch
transe_candidate_scores = _impl.transe_candidate_scores

__all__ = ["BACKEND", "transe_sgd_epoch", "transe_candidate_scores"]
