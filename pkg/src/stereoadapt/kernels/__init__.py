"""Kernel backend selection.

The compiled Cython kernels are used when available; the pure-torch
fallback otherwise.  STEREOADAPT_KERNELS=python|cython forces a backend
(cython raises if the extension is missing).
"""

import os

from . import reference

_requested = os.environ.get("STEREOADAPT_KERNELS", "auto")

if _requested not in ("auto", "cython", "python"):
    raise RuntimeError(
        f"STEREOADAPT_KERNELS must be auto, cython, or python, got {_requested!r}"
    )

if _requested == "python":
    _backend = reference
else:
    try:
        from . import compiled as _backend
    except ImportError:
        if _requested == "cython":
            raise
        _backend = reference

BACKEND = _backend.NAME
warp_by_disparity = _backend.warp_by_disparity
correlation = _backend.correlation


def available_backends():
    """Names of backends importable in this environment."""
    names = ["python"]
    try:
        from . import compiled  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def get_backend(name: str):
    """Return the backend module for explicit cross-checking or benchmarks."""
    if name == "python":
        return reference
    if name == "cython":
        from . import compiled

        return compiled
    raise ValueError(f"unknown kernel backend {name!r}")
