# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the loops in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def dissipation_scan(const double[:, :, ::1] M0, const double[:, :, ::1] P, const double[:, ::1] lo,
                     const double[:, ::1] hi, const cnp.intp_t[::1] rows, const cnp.intp_t[::1] cols,
                     const double[:, :, ::1] G, const double[:, ::1] W, const double[::1] phi):
    cdef Py_ssize_t N = M0.shape[0], n = M0.shape[1], S = W.shape[0], ell = rows.shape[0]
    cdef Py_ssize_t i, s, a, b, j
    cdef double sup, hw, acc, c, v, best, om
    cdef Py_ssize_t barg
    cdef double pw[16]
    out_om = np.empty(N)
    out_worst = np.empty(N)
    out_arg = np.empty(N, dtype=np.intp)
    cdef double[::1] o_om = out_om
    cdef double[::1] o_worst = out_worst
    cdef cnp.intp_t[::1] o_arg = out_arg
    if n > 16:
        raise ValueError("dimension above 16 is not supported by the compiled kernel")
    with nogil:
        for i in range(N):
            om = INFINITY
            best = -INFINITY
            barg = 0
            for s in range(S):
                sup = 0.0
                hw = 0.0
                for a in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc = acc + P[i, a, b] * W[s, b]
                    pw[a] = acc
                    acc = 0.0
                    c = 0.0
                    for b in range(n):
                        acc = acc + M0[i, a, b] * W[s, b]
                        c = c + G[i, a, b] * W[s, b]
                    sup = sup + W[s, a] * acc
                    hw = hw + W[s, a] * c
                for j in range(ell):
                    c = pw[rows[j]] * W[s, cols[j]]
                    if lo[i, j] * c > hi[i, j] * c:
                        sup = sup + lo[i, j] * c
                    else:
                        sup = sup + hi[i, j] * c
                if sup >= 0.0 and hw < om:
                    om = hw
                v = sup - phi[i] * hw
                if v > best:
                    best = v
                    barg = s
            o_om[i] = om
            o_worst[i] = best
            o_arg[i] = barg
    return out_om, out_worst, out_arg
