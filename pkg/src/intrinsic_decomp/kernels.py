"""Kernel backend selection.

The compiled Cython kernels are used when importable; otherwise the numpy
implementations are used. Set ``INTRINSIC_DECOMP_PURE=1`` to force the
numpy path.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels as _compiled
except ImportError:
    _compiled = None

if _compiled is not None and not os.environ.get("INTRINSIC_DECOMP_PURE"):
    BACKEND, _impl = "cython", _compiled
else:
    BACKEND, _impl = "numpy", _pykernels


def available():
    """Names of the usable backends."""
    return ["numpy"] + (["cython"] if _compiled is not None else [])


def _resolve(impl):
    if impl is None:
        return _impl
    if impl == "numpy":
        return _pykernels
    if impl == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    return impl


def _prep(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def recursive_pass(x, g, reverse=False, impl=None):
    """Run Y_i = (1-g_i) X_i + g_i Y_{i-1} along the last axis of ``x``.

    ``x`` is (C, H, L) and ``g`` is (H, L). With ``reverse`` the recursion
    starts from the last element and moves left.
    """
    impl = _resolve(impl)
    x = _prep(x, x.dtype if x.dtype in (np.float32, np.float64) else np.float64)
    return impl.recursive_pass(x, _prep(g, x.dtype), bool(reverse))


def recursive_pass_adjoint(dy, x, y, g, reverse=False, impl=None):
    """Return (dL/dx, dL/dg) of ``recursive_pass`` given dL/dy.

    dL/dg is summed over channels since the coefficients are shared.
    """
    impl = _resolve(impl)
    dt = x.dtype
    return impl.recursive_pass_adjoint(
        _prep(dy, dt), _prep(x, dt), _prep(y, dt), _prep(g, dt), bool(reverse)
    )
