"""Kernel backend selection.

The compiled extension (``_native``) is preferred when importable; the
numpy fallback is used otherwise.  Set ``PANCSEG_KERNELS=numpy`` to force
the fallback or ``PANCSEG_KERNELS=native`` to make a missing extension an
error (useful in benchmarks and CI).
"""

import os

from . import _numpy

_requested = os.environ.get("PANCSEG_KERNELS", "auto")

if _requested not in ("auto", "native", "numpy"):
    raise ValueError(f"PANCSEG_KERNELS must be auto|native|numpy, got {_requested!r}")

if _requested == "numpy":
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _native as _impl
        BACKEND = "native"
    except ImportError:
        if _requested == "native":
            raise
        _impl = _numpy
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
bilinear_sample = _impl.bilinear_sample
slic_assign = _impl.slic_assign


def backends():
    """Importable backends as {name: module}, for benchmarks and tests."""
    out = {"numpy": _numpy}
    try:
        from . import _native
        out["native"] = _native
    except ImportError:
        pass
    return out
