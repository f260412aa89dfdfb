# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops in ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _lu_solve(double[:, ::1] lu, int[::1] piv, double[::1] b) noexcept nogil:
    cdef Py_ssize_t n = b.shape[0]
    cdef Py_ssize_t i, j
    cdef double tmp, s
    for i in range(n):
        j = piv[i]
        if j != i:
            tmp = b[i]
            b[i] = b[j]
            b[j] = tmp
    for i in range(n):
        s = b[i]
        for j in range(i):
            s -= lu[i, j] * b[j]
        b[i] = s
    for i in range(n - 1, -1, -1):
        s = b[i]
        for j in range(i + 1, n):
            s -= lu[i, j] * b[j]
        b[i] = s / lu[i, i]


def lu_solve(double[:, ::1] lu, piv, double[::1] b):
    cdef int[::1] p = np.ascontiguousarray(piv, dtype=np.intc)
    with nogil:
        _lu_solve(lu, p, b)


def emt_step(double[:, ::1] lu, piv,
             long[:, ::1] frm, long[:, ::1] to, double[:, ::1] tscale,
             double[:, :, ::1] G, double[:, :, ::1] P, double[:, :, ::1] Q,
             double[:, ::1] hist, double[:, ::1] emf, double[::1] inj,
             double[::1] v, double[:, ::1] ibr):
    cdef int[::1] p = np.ascontiguousarray(piv, dtype=np.intc)
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t nb = hist.shape[0]
    cdef Py_ssize_t b, k, m
    cdef double s, vf, vt
    cdef double vp[3]
    cdef double src[3]
    with nogil:
        for k in range(n):
            v[k] = inj[k]
        for b in range(nb):
            for k in range(3):
                s = -hist[b, k]
                for m in range(3):
                    s += G[b, k, m] * emf[b, m]
                src[k] = s
            for k in range(3):
                if frm[b, k] >= 0:
                    v[frm[b, k]] += src[k]
                if to[b, k] >= 0:
                    v[to[b, k]] -= tscale[b, k] * src[k]
        _lu_solve(lu, p, v)
        for b in range(nb):
            for k in range(3):
                vf = v[frm[b, k]] if frm[b, k] >= 0 else 0.0
                vt = v[to[b, k]] if to[b, k] >= 0 else 0.0
                vp[k] = vf - tscale[b, k] * vt - emf[b, k]
            for k in range(3):
                s = hist[b, k]
                for m in range(3):
                    s += G[b, k, m] * vp[m]
                ibr[b, k] = s
            for k in range(3):
                s = 0.0
                for m in range(3):
                    s += P[b, k, m] * vp[m] + Q[b, k, m] * ibr[b, m]
                hist[b, k] = s


def ring_push(double[:, ::1] buf, double[:, ::1] cum, double[::1] run, Py_ssize_t pos, double[::1] new):
    cdef Py_ssize_t c
    cdef Py_ssize_t nc = buf.shape[0]
    with nogil:
        for c in range(nc):
            run[c] += new[c]
            buf[c, pos] = new[c]
            cum[c, pos] = run[c]
