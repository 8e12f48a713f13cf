# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled stencil kernels; same contract as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _apply(const double[:, :, ::1] ups, const double[:, ::1] u,
                 const double[:, :, ::1] K, double[:, ::1] pad, double[:, ::1] acc,
                 double[:, ::1] out) noexcept nogil:
    # pad is (m0 + 2, m1 + 2) with a zero ring; acc and out are (m0, m1)
    cdef Py_ssize_t m0 = u.shape[0], m1 = u.shape[1], nk = K.shape[0]
    cdef Py_ssize_t a, b, k, dx, dy
    cdef double w
    for a in range(m0):
        for b in range(m1):
            pad[a + 1, b + 1] = u[a, b]
            out[a, b] = 0.0
    for k in range(nk):
        for a in range(m0):
            for b in range(m1):
                acc[a, b] = 0.0
        for dx in range(3):
            for dy in range(3):
                w = K[k, dx, dy]
                if w == 0.0:
                    continue
                for a in range(m0):
                    for b in range(m1):
                        acc[a, b] += w * pad[a + dx, b + dy]
        for a in range(m0):
            for b in range(m1):
                out[a, b] += ups[k, a, b] * acc[a, b]


def apply_stencil(ups, u, K):
    cdef double[:, :, ::1] ups_v = np.ascontiguousarray(ups, dtype=np.float64)
    cdef double[:, ::1] u_v = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[:, :, ::1] K_v = np.ascontiguousarray(K, dtype=np.float64)
    out = np.empty((u_v.shape[0], u_v.shape[1]))
    cdef double[:, ::1] out_v = out
    cdef double[:, ::1] pad = np.zeros((u_v.shape[0] + 2, u_v.shape[1] + 2))
    cdef double[:, ::1] acc = np.empty_like(out)
    with nogil:
        _apply(ups_v, u_v, K_v, pad, acc, out_v)
    return out


def richardson(u, f, ups, K, double omega, int steps):
    cdef double[:, :, ::1] ups_v = np.ascontiguousarray(ups, dtype=np.float64)
    cdef double[:, :, ::1] K_v = np.ascontiguousarray(K, dtype=np.float64)
    cdef double[:, ::1] f_v = np.ascontiguousarray(f, dtype=np.float64)
    res = np.array(u, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] u_v = res
    cdef double[:, ::1] au = np.empty_like(res)
    cdef double[:, ::1] pad = np.zeros((res.shape[0] + 2, res.shape[1] + 2))
    cdef double[:, ::1] acc = np.empty_like(res)
    cdef Py_ssize_t s, a, b
    with nogil:
        for s in range(steps):
            _apply(ups_v, u_v, K_v, pad, acc, au)
            for a in range(u_v.shape[0]):
                for b in range(u_v.shape[1]):
                    u_v[a, b] += omega * (f_v[a, b] - au[a, b])
    return res
