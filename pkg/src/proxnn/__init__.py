"""Proximal solvers, unfolded primal-dual denoisers, and PnP restoration."""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
