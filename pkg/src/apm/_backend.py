"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-Python module
is the fallback. Both expose the same functions with bit-identical results,
so selection only affects speed. APM_BACKEND=python|cython forces a choice.
"""

from __future__ import annotations

import os

from apm import _slowcore


def _load():
    forced = os.environ.get("APM_BACKEND", "").strip().lower()
    if forced in ("python", "slow"):
        return _slowcore
    try:
        from apm import _fastcore
    except ImportError:
        if forced in ("cython", "fast"):
            raise ImportError(
                "APM_BACKEND requested the compiled backend but apm._fastcore "
                "is not built; run `pip install -e . --no-build-isolation`"
            )
        return _slowcore
    return _fastcore


kernels = _load()


def backend_name() -> str:
    return kernels.NAME


def available_backends():
    """Name -> module for every importable backend (used by tests/benchmarks)."""
    out = {"python": _slowcore}
    try:
        from apm import _fastcore

        out["cython"] = _fastcore
    except ImportError:
        pass
    return out
