"""Hot-loop kernels: compiled extension when available, numpy otherwise.

The selection happens once at import. Set ``PROXNN_FORCE_NUMPY=1`` to skip
the compiled extension (used by the benchmark and by backend-parity tests).
"""

import os

import numpy as np

from . import numpy_backend

if os.environ.get("PROXNN_FORCE_NUMPY", "0") not in ("1", "true", "yes"):
    try:
        from . import _corr3x3 as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = numpy_backend
        BACKEND = "numpy"
else:
    _impl = numpy_backend
    BACKEND = "numpy"


# validated-input fast path for internal hot loops (power/Lanczos iterations)
raw = _impl


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def corr3x3_fwd(kernels, x):
    """Apply a (J, C, 3, 3) correlation stack to a (C, H, W) array."""
    kernels = _f64(kernels)
    x = _f64(x)
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ValueError(f"kernel stack must be (J, C, 3, 3), got {kernels.shape}")
    if x.ndim != 3 or x.shape[0] != kernels.shape[1]:
        raise ValueError(f"input {x.shape} does not match stack {kernels.shape}")
    return _impl.corr3x3_fwd(kernels, x)


def flip_transpose(kernels):
    """(J, C, 3, 3) -> (C, J, 3, 3) with both spatial axes reversed."""
    return np.ascontiguousarray(np.asarray(kernels)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def corr3x3_adj(kernels, u):
    """Exact adjoint of :func:`corr3x3_fwd` applied to a (J, H, W) array.

    Implemented as the forward correlation of the flipped-transposed stack,
    so an untied stack holding exactly those kernels reproduces the tied
    adjoint bit for bit.
    """
    kernels = _f64(kernels)
    u = _f64(u)
    if u.ndim != 3 or u.shape[0] != kernels.shape[0]:
        raise ValueError(f"input {u.shape} does not match stack {kernels.shape}")
    return _impl.corr3x3_fwd(flip_transpose(kernels), u)


def corr3x3_wgrad(cot, x):
    """Kernel gradient of ``<cot, corr3x3_fwd(k, x)>``; returns (J, C, 3, 3)."""
    return _impl.corr3x3_wgrad(_f64(cot), _f64(x))
