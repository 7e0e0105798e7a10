"""Backend selection for the skeletal-convolution hot loop.

The compiled Cython module is used when it imports; otherwise the numpy
fallback. ``IKMR_BACKEND=python`` forces the fallback.
"""

import os

from . import fallback

try:
    from . import _skconv as compiled
except ImportError:  # extension not built
    compiled = None

BACKENDS = {"python": fallback}
if compiled is not None:
    BACKENDS["compiled"] = compiled

_requested = os.environ.get("IKMR_BACKEND", "").strip().lower()
if _requested and _requested not in BACKENDS:
    raise ImportError(f"IKMR_BACKEND={_requested!r} is not available (have {sorted(BACKENDS)})")
_active = _requested or ("compiled" if compiled is not None else "python")


def active_name() -> str:
    return _active


def get():
    return BACKENDS[_active]


def set_backend(name: str):
    """Switch the process-wide backend; returns the previous name."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {sorted(BACKENDS)})")
    prev, _active = _active, name
    return prev
