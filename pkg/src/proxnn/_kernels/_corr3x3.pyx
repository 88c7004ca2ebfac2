# Compiled core for the 3x3 multichannel correlation stack, its exact
# adjoint, and the kernel-weight gradient. All three run on zero-padded
# "same"-size geometry and float64 buffers; shape checks live in the
# Python wrapper layer. Loops stream one kernel tap at a time over
# contiguous rows so the compiler can vectorize the inner accumulation.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def corr3x3_fwd(double[:, :, :, ::1] k, double[:, :, ::1] x):
    """out[j] = sum_c k[j,c] cross-correlated with x[c], zero padding."""
    cdef Py_ssize_t J = k.shape[0]
    cdef Py_ssize_t C = k.shape[1]
    cdef Py_ssize_t H = x.shape[1]
    cdef Py_ssize_t W = x.shape[2]
    cdef cnp.ndarray[double, ndim=3] xp_arr = np.zeros((C, H + 2, W + 2))
    cdef double[:, :, ::1] xp = xp_arr
    cdef cnp.ndarray[double, ndim=3] out_arr = np.zeros((J, H, W))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t j, c, y, xx, dy, dx
    cdef double coef

    with nogil:
        for c in range(C):
            for y in range(H):
                for xx in range(W):
                    xp[c, y + 1, xx + 1] = x[c, y, xx]
        for j in range(J):
            for c in range(C):
                for dy in range(3):
                    for dx in range(3):
                        coef = k[j, c, dy, dx]
                        if coef == 0.0:
                            continue
                        for y in range(H):
                            for xx in range(W):
                                out[j, y, xx] += coef * xp[c, y + dy, xx + dx]
    return out_arr


def corr3x3_adj(double[:, :, :, ::1] k, double[:, :, ::1] u):
    """Exact adjoint of corr3x3_fwd: transposed correlation, zero padding."""
    cdef Py_ssize_t J = k.shape[0]
    cdef Py_ssize_t C = k.shape[1]
    cdef Py_ssize_t H = u.shape[1]
    cdef Py_ssize_t W = u.shape[2]
    cdef cnp.ndarray[double, ndim=3] up_arr = np.zeros((J, H + 2, W + 2))
    cdef double[:, :, ::1] up = up_arr
    cdef cnp.ndarray[double, ndim=3] out_arr = np.zeros((C, H, W))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t j, c, y, xx, dy, dx
    cdef double coef

    with nogil:
        for j in range(J):
            for y in range(H):
                for xx in range(W):
                    up[j, y + 1, xx + 1] = u[j, y, xx]
        for c in range(C):
            for j in range(J):
                for dy in range(3):
                    for dx in range(3):
                        coef = k[j, c, dy, dx]
                        if coef == 0.0:
                            continue
                        for y in range(H):
                            for xx in range(W):
                                out[c, y, xx] += coef * up[j, y + 2 - dy, xx + 2 - dx]
    return out_arr


def corr3x3_wgrad(double[:, :, ::1] cot, double[:, :, ::1] x):
    """Gradient of <cot, corr3x3_fwd(k, x)> with respect to k."""
    cdef Py_ssize_t J = cot.shape[0]
    cdef Py_ssize_t C = x.shape[0]
    cdef Py_ssize_t H = x.shape[1]
    cdef Py_ssize_t W = x.shape[2]
    cdef cnp.ndarray[double, ndim=3] xp_arr = np.zeros((C, H + 2, W + 2))
    cdef double[:, :, ::1] xp = xp_arr
    cdef cnp.ndarray[double, ndim=4] g_arr = np.zeros((J, C, 3, 3))
    cdef double[:, :, :, ::1] g = g_arr
    cdef Py_ssize_t j, c, y, xx, dy, dx
    cdef double acc

    with nogil:
        for c in range(C):
            for y in range(H):
                for xx in range(W):
                    xp[c, y + 1, xx + 1] = x[c, y, xx]
        for j in range(J):
            for c in range(C):
                for dy in range(3):
                    for dx in range(3):
                        acc = 0.0
                        for y in range(H):
                            for xx in range(W):
                                acc += cot[j, y, xx] * xp[c, y + dy, xx + dx]
                        g[j, c, dy, dx] = acc
    return g_arr
