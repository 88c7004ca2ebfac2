"""Pure-numpy fallback for the 3x3 correlation core.

Same contracts as the compiled extension: float64, zero padding, "same"
output size. Built on sliding-window views so each call is a single einsum.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _padded_windows(x):
    C, H, W = x.shape
    xp = np.zeros((C, H + 2, W + 2))
    xp[:, 1:-1, 1:-1] = x
    # (C, H, W, 3, 3) view over the padded array
    return sliding_window_view(xp, (3, 3), axis=(1, 2))


def corr3x3_fwd(k, x):
    """out[j] = sum_c k[j,c] cross-correlated with x[c], zero padding."""
    win = _padded_windows(x)
    return np.einsum("jcyx,chwyx->jhw", k, win, optimize=True)


def corr3x3_adj(k, u):
    """Exact adjoint of corr3x3_fwd: transposed correlation, zero padding."""
    win = _padded_windows(u)
    # correlate with the spatially flipped kernels, summing over j
    return np.einsum("jcyx,jhwyx->chw", k[:, :, ::-1, ::-1], win, optimize=True)


def corr3x3_wgrad(cot, x):
    """Gradient of <cot, corr3x3_fwd(k, x)> with respect to k."""
    win = _padded_windows(x)
    return np.einsum("jhw,chwyx->jcyx", cot, win, optimize=True)
