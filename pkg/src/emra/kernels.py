"""Hot-kernel dispatch.

The compiled Cython backend is used when it was built; otherwise the numpy
backend in ``_pykernels`` takes over. ``EMRA_PURE_PYTHON=1`` forces the
fallback (useful for the benchmark and for cross-checking both backends).
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("EMRA_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

_NATIVE = (np.dtype(np.float32), np.dtype(np.float64))


def _dispatch(name):
    fast = getattr(_impl, name)
    slow = getattr(_pykernels, name)
    if fast is slow:
        return slow

    def call(*arrays, **kw):
        # the compiled core covers float32/float64; wider types use numpy
        if arrays[0].dtype in _NATIVE:
            return fast(*arrays, **kw)
        return slow(*arrays, **kw)

    call.__name__ = name
    return call


crc64 = _impl.crc64
dwconv3x3_forward = _dispatch("dwconv3x3_forward")
dwconv3x3_backward = _dispatch("dwconv3x3_backward")
fuse_forward = _dispatch("fuse_forward")
fuse_backward = _dispatch("fuse_backward")


def available_backends():
    backends = {"python": _pykernels}
    try:
        from . import _ckernels

        backends["cython"] = _ckernels
    except ImportError:
        pass
    return backends
