"""Compiled helper for the symmetric training correlation matrix."""

import math

import numba as nb
import numpy as np

SQRT5 = math.sqrt(5.0)


@nb.njit(cache=True, fastmath=True)
def _lower(a, out):
    n, m = a.shape
    for i in range(n):
        out[i, i] = 1.0
        for j in range(i):
            s = 0.0
            for k in range(m):
                d = a[i, k] - a[j, k]
                s += d * d
            h = SQRT5 * math.sqrt(s)
            out[i, j] = (1.0 + h + h * h / 3.0) * math.exp(-h)


def matern_lower(scaled):
    """Lower triangle (diagonal included) of the Matern 5/2 matrix, Fortran order.

    The strict upper triangle is left uninitialised; LAPACK's lower Cholesky
    never reads it.
    """
    n = len(scaled)
    out = np.empty((n, n), order="F")
    _lower(np.ascontiguousarray(scaled, dtype=float), out)
    return out
