"""Kernel dispatch: compiled core when built, numpy otherwise.

Set ``VIPSEG_KERNELS=numpy`` to force the fallback, or ``VIPSEG_KERNELS=cython``
to fail loudly when the extension is missing.
"""

from __future__ import annotations

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

AGG_FREE_ENERGY = _fallback.AGG_FREE_ENERGY
AGG_MAX = _fallback.AGG_MAX
AGG_MEAN = _fallback.AGG_MEAN


def _load():
    choice = os.environ.get("VIPSEG_KERNELS", "auto").lower()
    if choice == "numpy":
        return _fallback
    try:
        from . import _native
    except ImportError:
        if choice == "cython":
            raise
        log.debug("compiled kernels unavailable, using numpy fallback")
        return _fallback
    return _native


_impl = _load()

IMPLEMENTATION: str = _impl.IMPLEMENTATION
softmax_rows = _impl.softmax_rows
transition_matrix = _impl.transition_matrix
propagate = _impl.propagate
score_substitutions = _impl.score_substitutions
free_energy = _impl.free_energy
aggregate_groups = _impl.aggregate_groups


def implementations():
    """Every importable kernel module, keyed by name (for benchmarks and tests)."""
    found = {"numpy": _fallback}
    try:
        from . import _native
    except ImportError:
        pass
    else:
        found["cython"] = _native
    return found
