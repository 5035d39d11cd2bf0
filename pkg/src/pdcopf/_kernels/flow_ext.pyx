# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled branch-end flow kernels (same contract as ``flow_py``)."""

import numpy as np
from libc.math cimport cos, sin


def branch_flows(double[::1] gs, double[::1] bs, double[::1] gm, double[::1] bm,
                 double[::1] va, double[::1] vb, double[::1] dtheta):
    cdef Py_ssize_t n = gs.shape[0], i
    p_arr = np.empty(n)
    q_arr = np.empty(n)
    dp_arr = np.empty((n, 4))
    dq_arr = np.empty((n, 4))
    cdef double[::1] p = p_arr, q = q_arr
    cdef double[:, ::1] dp = dp_arr, dq = dq_arr
    cdef double cs, sn, p1, p2, q1, vv
    for i in range(n):
        cs = cos(dtheta[i])
        sn = sin(dtheta[i])
        p1 = gm[i] * cs + bm[i] * sn
        p2 = -gm[i] * sn + bm[i] * cs
        q1 = gm[i] * sn - bm[i] * cs
        vv = va[i] * vb[i]
        p[i] = gs[i] * va[i] * va[i] - vv * p1
        q[i] = -bs[i] * va[i] * va[i] - vv * q1
        dp[i, 0] = -vv * p2
        dp[i, 1] = vv * p2
        dp[i, 2] = 2.0 * gs[i] * va[i] - vb[i] * p1
        dp[i, 3] = -va[i] * p1
        dq[i, 0] = -vv * p1
        dq[i, 1] = vv * p1
        dq[i, 2] = -2.0 * bs[i] * va[i] - vb[i] * q1
        dq[i, 3] = -va[i] * q1
    return p_arr, q_arr, dp_arr, dq_arr


def branch_hessians(double[::1] gs, double[::1] bs, double[::1] gm, double[::1] bm,
                    double[::1] va, double[::1] vb, double[::1] dtheta, double[::1] wp,
                    double[::1] wq, double[::1] wo, double[:, ::1] dp, double[:, ::1] dq):
    cdef Py_ssize_t n = gs.shape[0], i, r, c, k
    out_arr = np.empty((n, 10))
    cdef double[:, ::1] out = out_arr
    cdef double cs, sn, p1, p2, q1, vv, a, w, u
    for i in range(n):
        cs = cos(dtheta[i])
        sn = sin(dtheta[i])
        p1 = gm[i] * cs + bm[i] * sn
        p2 = -gm[i] * sn + bm[i] * cs
        q1 = gm[i] * sn - bm[i] * cs
        vv = va[i] * vb[i]
        a = wp[i]
        w = wq[i]
        out[i, 0] = a * vv * p1 - w * vv * p2
        out[i, 1] = -a * vv * p1 + w * vv * p2
        out[i, 2] = -a * vb[i] * p2 - w * vb[i] * p1
        out[i, 3] = -a * va[i] * p2 - w * va[i] * p1
        out[i, 4] = a * vv * p1 - w * vv * p2
        out[i, 5] = a * vb[i] * p2 + w * vb[i] * p1
        out[i, 6] = a * va[i] * p2 + w * va[i] * p1
        out[i, 7] = 2.0 * a * gs[i] - 2.0 * w * bs[i]
        out[i, 8] = -a * p1 - w * q1
        out[i, 9] = 0.0
        u = wo[i]
        if u != 0.0:
            k = 0
            for r in range(4):
                for c in range(r, 4):
                    out[i, k] += u * (dp[i, r] * dp[i, c] + dq[i, r] * dq[i, c])
                    k += 1
    return out_arr
