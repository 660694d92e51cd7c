"""Kernel backend selection.

The gather/scatter kernels that dominate runtime (dilated-conv im2col,
2x2 max-pool routing, bilinear resampling) exist twice: a compiled Cython
extension (``crowdscale._core``) and a vectorized numpy fallback. The
compiled version is used when importable; set CROWDSCALE_BACKEND=numpy or
=cython to force one. ``benchmarks/bench_backends.py`` compares them.
"""

import os

from . import _fallback

try:
    from crowdscale import _core
except ImportError:  # extension not built
    _core = None

_KERNELS = ("im2col", "maxpool2_forward", "maxpool2_backward",
            "bilinear_forward", "bilinear_backward")


def available_backends():
    names = ["numpy"]
    if _core is not None:
        names.insert(0, "cython")
    return names


def get_impl(name):
    """Return the kernel module for an explicitly named backend."""
    if name == "numpy":
        return _fallback
    if name == "cython":
        if _core is None:
            raise ImportError("compiled backend not built")
        return _core
    raise ValueError(f"unknown backend {name!r}")


def _select():
    choice = os.environ.get("CROWDSCALE_BACKEND", "auto")
    if choice == "auto":
        return "cython" if _core is not None else "numpy"
    if choice not in ("numpy", "cython"):
        raise ValueError(f"CROWDSCALE_BACKEND must be auto, numpy or cython, got {choice!r}")
    return choice


_active_name = _select()
_active = get_impl(_active_name)


def backend_name():
    return _active_name


def use_backend(name):
    """Switch the active backend at runtime (used by tests/benchmarks)."""
    global _active, _active_name
    _active = get_impl(name)
    _active_name = name


def __getattr__(attr):
    if attr in _KERNELS:
        return getattr(_active, attr)
    raise AttributeError(attr)
