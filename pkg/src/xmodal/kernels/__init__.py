"""Dense kernel backends.

Two interchangeable implementations of the hot matrix products exist: a
compiled Cython core (``_ckernels``) and a NumPy fallback (``_pykernels``).
The compiled core is preferred when importable; set ``XMODAL_KERNELS=py``
or ``XMODAL_KERNELS=ext`` to force a backend, or call :func:`set_backend`
at runtime (used by the benchmark and the parity tests).

Both backends are deterministic: for fixed inputs they return bit-identical
results on every call. They may differ from each other in the last ulp
because the compiled core accumulates strictly left to right while NumPy
delegates to BLAS.
"""

import os

from . import _pykernels

_BACKENDS = {"py": _pykernels}

try:
    from . import _ckernels

    _BACKENDS["ext"] = _ckernels
except ImportError:
    _ckernels = None

_active_name = None
_active = None


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Select the kernel backend by name ('ext' or 'py')."""
    global _active, _active_name
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {available_backends()}"
        )
    _active = _BACKENDS[name]
    _active_name = name
    return name


def backend_name():
    return _active_name


_requested = os.environ.get("XMODAL_KERNELS", "auto").strip().lower()
if _requested in ("", "auto"):
    set_backend("ext" if "ext" in _BACKENDS else "py")
else:
    set_backend(_requested)


def mm_nn(a, b):
    """a @ b"""
    return _active.mm_nn(a, b)


def mm_nt(a, b):
    """a @ b.T"""
    return _active.mm_nt(a, b)


def mm_tn(a, b):
    """a.T @ b"""
    return _active.mm_tn(a, b)
