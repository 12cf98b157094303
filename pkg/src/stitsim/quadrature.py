"""Adaptive tensor-product Gauss-Legendre quadrature on rectangles."""
from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def _gl(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return (x + 1) / 2, w / 2


def _rule(f, rects: np.ndarray, order: int) -> np.ndarray:
    """Tensor rule on each rectangle ``[a0, a1] x [b0, b1]``.

    ``f(a, b)`` receives arrays of shape ``(m,)`` and returns ``(m,)`` or
    ``(m, k)``.  The result has shape ``(n_rects, k)``.
    """
    x, w = _gl(order)
    a0, a1, b0, b1 = rects.T
    A = a0[:, None, None] + (a1 - a0)[:, None, None] * x[None, :, None]
    B = b0[:, None, None] + (b1 - b0)[:, None, None] * x[None, None, :]
    A, B = np.broadcast_arrays(A, B)
    vals = np.asarray(f(A.ravel(), B.ravel()), dtype=float)
    vals = vals.reshape(len(rects), order * order, -1)
    W = np.outer(w, w).ravel()
    area = (a1 - a0) * (b1 - b0)
    return np.einsum("rqk,q->rk", vals, W) * area[:, None]


def adaptive_gauss_legendre_2d(f, a=(0.0, 1.0), b=(0.0, 1.0), tol=1e-10,
                               order=10, max_rects=200_000, initial=None):
    """Integrate ``f`` over ``[a0, a1] x [b0, b1]`` to absolute tolerance ``tol``.

    Each rectangle's estimate is compared with the sum over its four
    quadrants; a rectangle is accepted when the difference is below its
    area share of ``tol``.  ``f`` may be vector-valued, in which case the
    error is measured in the max norm.  ``initial`` optionally lists
    breakpoints ``(a_breaks, b_breaks)`` for the starting grid.

    Returns ``(value, error_estimate)``.
    """
    if initial is None:
        a_br, b_br = np.array(a, float), np.array(b, float)
    else:
        a_br, b_br = (np.asarray(v, float) for v in initial)
    total_area = (a_br[-1] - a_br[0]) * (b_br[-1] - b_br[0])
    rects = np.array([[a_br[i], a_br[i + 1], b_br[j], b_br[j + 1]]
                      for i in range(len(a_br) - 1) for j in range(len(b_br) - 1)])
    coarse = _rule(f, rects, order)
    result = np.zeros(coarse.shape[1])
    err_total = 0.0
    n_done = 0
    while len(rects):
        a0, a1, b0, b1 = rects.T
        am, bm = (a0 + a1) / 2, (b0 + b1) / 2
        kids = np.concatenate([
            np.stack([a0, am, b0, bm], 1), np.stack([am, a1, b0, bm], 1),
            np.stack([a0, am, bm, b1], 1), np.stack([am, a1, bm, b1], 1)])
        kid_vals = _rule(f, kids, order)
        n = len(rects)
        fine = kid_vals[:n] + kid_vals[n:2 * n] + kid_vals[2 * n:3 * n] + kid_vals[3 * n:]
        err = np.abs(fine - coarse).max(axis=1)
        share = tol * (a1 - a0) * (b1 - b0) / total_area
        done = err <= share
        result += fine[done].sum(axis=0)
        err_total += err[done].sum()
        n_done += int(done.sum())
        if n_done + 4 * int((~done).sum()) > max_rects:
            raise RuntimeError("quadrature did not converge within max_rects")
        todo = np.flatnonzero(~done)
        rects = np.concatenate([kids[todo + q * n] for q in range(4)])
        coarse = np.concatenate([kid_vals[todo + q * n] for q in range(4)])
    return result, err_total
