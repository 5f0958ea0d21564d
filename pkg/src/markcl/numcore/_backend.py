"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``MARKCL_BACKEND=python`` to force the fallback.
"""
import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:  # extension not built
    _compiled = None
else:
    BACKENDS["compiled"] = _compiled


def _select():
    wanted = os.environ.get("MARKCL_BACKEND", "").strip().lower()
    if wanted == "python":
        return "python"
    if wanted == "compiled" and _compiled is None:
        logger.warning("MARKCL_BACKEND=compiled but the extension is not built; using python")
    return "compiled" if _compiled is not None else "python"


_active = _select()
kernels = BACKENDS[_active]


def backend_name():
    return _active


def set_backend(name):
    """Switch kernels at runtime (used by tests and the benchmark)."""
    global _active, kernels
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    _active = name
    kernels = BACKENDS[name]
