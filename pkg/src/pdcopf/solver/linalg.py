"""Symmetric indefinite factorization with inertia, used by the IPM."""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack


class SingularSystem(np.linalg.LinAlgError):
    pass


def ruiz_scaling(a: np.ndarray, sweeps: int = 4) -> np.ndarray:
    """Diagonal ``d`` such that ``diag(d) a diag(d)`` has rows of unit max-norm.

    A congruence, so the inertia of ``a`` is unchanged.
    """
    n = a.shape[0]
    d = np.ones(n)
    work = np.abs(a)
    for _ in range(sweeps):
        r = work.max(axis=1) if n else np.zeros(0)
        r = np.where(r > 0, r, 1.0)
        s = 1.0 / np.sqrt(r)
        d *= s
        work *= s[:, None]
        work *= s[None, :]
    return d


class LdlFactor:
    """Bunch-Kaufman ``P L D L^T P^T`` factorization of a dense symmetric matrix.

    The matrix is equilibrated first; ``inertia`` is ``(n_pos, n_neg, n_zero)``
    read off the block-diagonal ``D`` of the scaled matrix.
    """

    def __init__(self, matrix: np.ndarray, zero_tol: float = 1e-13, equilibrate: bool = True):
        a = np.asarray(matrix, dtype=float)
        n = a.shape[0]
        self.scale = ruiz_scaling(a) if equilibrate and n else np.ones(n)
        a = a * self.scale[:, None] * self.scale[None, :]
        lwork = max(1, int(lapack.dsytrf_lwork(n, lower=1)[0])) if n else 1
        ldu, ipiv, info = lapack.dsytrf(a, lower=1, lwork=lwork)
        if info < 0:
            raise ValueError(f"dsytrf: illegal argument {-info}")
        self.n = n
        self._ldu = ldu
        self._ipiv = ipiv
        self.inertia = _inertia(ldu, ipiv, zero_tol * max(1.0, np.abs(a).max(initial=0.0)))

    @property
    def singular(self) -> bool:
        return self.inertia[2] > 0

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.singular:
            raise SingularSystem("matrix is numerically singular")
        x, info = lapack.dsytrs(self._ldu, self._ipiv, rhs * self.scale, lower=1)
        if info != 0:
            raise SingularSystem(f"dsytrs failed with info={info}")
        return x * self.scale


def _inertia(ldu, ipiv, tol):
    n = ldu.shape[0]
    diag = np.diagonal(ldu).copy()
    # 2x2 pivot blocks: consecutive negative ipiv entries, lower storage
    starts = np.flatnonzero(ipiv < 0)[0::2]
    single = np.ones(n, dtype=bool)
    single[starts] = False
    single[starts + 1] = False
    d1 = diag[single]
    a, c = diag[starts], diag[starts + 1]
    b = ldu[starts + 1, starts]
    half = np.sqrt(0.25 * (a - c) ** 2 + b * b)
    mid = 0.5 * (a + c)
    ev = np.concatenate([d1, mid + half, mid - half])
    zero = int(np.sum(np.abs(ev) <= tol))
    pos = int(np.sum(ev > tol))
    return pos, n - pos - zero, zero
