"""Kernel backend selection.

The compiled core is used when it imports; ``DYNSPLAT_BACKEND=python``
forces the numpy kernels (``=cython`` makes a missing extension an error).
"""

import os

from . import _kernels_py

try:
    from . import _kernels as _kernels_cy
except ImportError:  # not built
    _kernels_cy = None

_BACKENDS = {"python": _kernels_py}
if _kernels_cy is not None:
    _BACKENDS["cython"] = _kernels_cy

_num_threads = 1


def available():
    return sorted(_BACKENDS)


def get(name=None):
    name = (name or os.environ.get("DYNSPLAT_BACKEND") or "").lower()
    if not name:
        return _kernels_cy if _kernels_cy is not None else _kernels_py
    if name not in _BACKENDS:
        raise ImportError(f"rasterizer backend {name!r} unavailable (have {available()})")
    return _BACKENDS[name]


def set_num_threads(n):
    global _num_threads
    _num_threads = max(1, int(n))


def num_threads():
    return _num_threads
