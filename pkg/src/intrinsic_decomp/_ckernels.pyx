# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled recursive-filter line kernels.

Arrays are (C, H, L) signals with (H, L) coefficients; every pass runs
along the last axis. Semantics match ``_pykernels`` exactly.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def recursive_pass(real[:, :, ::1] x, real[:, ::1] g, bint reverse):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t c, h, i
    dtype = np.float32 if real is float else np.float64
    out = np.empty((C, H, L), dtype=dtype)
    cdef real[:, :, ::1] y = out
    if L == 0:
        return out
    with nogil:
        for c in range(C):
            for h in range(H):
                if not reverse:
                    y[c, h, 0] = x[c, h, 0]
                    for i in range(1, L):
                        y[c, h, i] = x[c, h, i] + g[h, i] * (y[c, h, i - 1] - x[c, h, i])
                else:
                    y[c, h, L - 1] = x[c, h, L - 1]
                    for i in range(L - 2, -1, -1):
                        y[c, h, i] = x[c, h, i] + g[h, i] * (y[c, h, i + 1] - x[c, h, i])
    return out


def recursive_pass_adjoint(real[:, :, ::1] dy, real[:, :, ::1] x,
                           real[:, :, ::1] y, real[:, ::1] g, bint reverse):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t c, h, i
    cdef real acc, gh
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((C, H, L), dtype=dtype)
    dg_arr = np.zeros((H, L), dtype=dtype)
    cdef real[:, :, ::1] dx = dx_arr
    cdef real[:, ::1] dg = dg_arr
    if L == 0:
        return dx_arr, dg_arr
    with nogil:
        for c in range(C):
            for h in range(H):
                acc = 0
                if not reverse:
                    for i in range(L - 1, 0, -1):
                        gh = dy[c, h, i] + acc
                        dx[c, h, i] = (1 - g[h, i]) * gh
                        dg[h, i] += gh * (y[c, h, i - 1] - x[c, h, i])
                        acc = g[h, i] * gh
                    dx[c, h, 0] = dy[c, h, 0] + acc
                else:
                    for i in range(0, L - 1):
                        gh = dy[c, h, i] + acc
                        dx[c, h, i] = (1 - g[h, i]) * gh
                        dg[h, i] += gh * (y[c, h, i + 1] - x[c, h, i])
                        acc = g[h, i] * gh
                    dx[c, h, L - 1] = dy[c, h, L - 1] + acc
    return dx_arr, dg_arr
