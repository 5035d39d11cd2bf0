"""Numpy reference implementation of the branch-end flow kernels.

Every branch end is evaluated in local coordinates ``(theta_a, theta_b, v_a,
v_b)`` where ``a`` is the sending bus of that end::

    p = gs va^2 - va vb (gm cos d + bm sin d)
    q = -bs va^2 - va vb (gm sin d - bm cos d)

with ``d`` the angle difference net of any phase shift.  ``gs, bs`` are the
self terms and ``gm, bm`` the mutual terms of the end (tap-adjusted).

Hessians are returned as the 10 upper-triangle entries of the 4x4 block in
row-major order (00, 01, 02, 03, 11, 12, 13, 22, 23, 33).
"""

import numpy as np


def branch_flows(gs, bs, gm, bm, va, vb, dtheta):
    cs, sn = np.cos(dtheta), np.sin(dtheta)
    p1 = gm * cs + bm * sn
    p2 = -gm * sn + bm * cs
    q1 = gm * sn - bm * cs
    vv = va * vb
    p = gs * va * va - vv * p1
    q = -bs * va * va - vv * q1
    dp = np.column_stack([-vv * p2, vv * p2, 2.0 * gs * va - vb * p1, -va * p1])
    dq = np.column_stack([-vv * p1, vv * p1, -2.0 * bs * va - vb * q1, -va * q1])
    return p, q, dp, dq


def branch_hessians(gs, bs, gm, bm, va, vb, dtheta, wp, wq, wo, dp, dq):
    """``wp * hess(p) + wq * hess(q) + wo * (dp dp' + dq dq')`` per end."""
    cs, sn = np.cos(dtheta), np.sin(dtheta)
    p1 = gm * cs + bm * sn
    p2 = -gm * sn + bm * cs
    q1 = gm * sn - bm * cs
    vv = va * vb
    zero = np.zeros_like(va)
    hp = np.column_stack(
        [vv * p1, -vv * p1, -vb * p2, -va * p2, vv * p1, vb * p2, va * p2, 2.0 * gs + zero, -p1, zero]
    )
    hq = np.column_stack(
        [-vv * p2, vv * p2, -vb * p1, -va * p1, -vv * p2, vb * p1, va * p1, -2.0 * bs + zero, -q1, zero]
    )
    iu, ju = np.triu_indices(4)
    outer = dp[:, iu] * dp[:, ju] + dq[:, iu] * dq[:, ju]
    return wp[:, None] * hp + wq[:, None] * hq + wo[:, None] * outer
