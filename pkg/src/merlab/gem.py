"""Gradient projection onto the cone of non-interfering directions."""

from __future__ import annotations

import numpy as np


def solve_nonneg_qp(P: np.ndarray, q: np.ndarray, max_iter: int | None = None):
    """Minimise ``0.5 u'Pu + q'u`` over ``u >= 0`` for positive semidefinite ``P``.

    Lawson-Hanson active-set iterations carried out on the Gram matrix.
    Returns ``(u, converged)``.
    """
    t = q.size
    u = np.zeros(t)
    passive = np.zeros(t, dtype=bool)
    scale = max(1.0, float(np.abs(P).max(initial=0.0)), float(np.abs(q).max(initial=0.0)))
    tol = 1e-12 * scale
    max_iter = 3 * t + 10 if max_iter is None else max_iter
    for _ in range(max_iter):
        w = -(P @ u + q)
        cand = np.where(~passive & (w > tol))[0]
        if cand.size == 0:
            return u, True
        passive[cand[np.argmax(w[cand])]] = True
        for _inner in range(max_iter):
            z = np.zeros(t)
            idx = np.where(passive)[0]
            z[idx] = np.linalg.lstsq(P[np.ix_(idx, idx)], -q[idx], rcond=None)[0]
            if np.all(z[idx] > 0):
                u = z
                break
            neg = idx[z[idx] <= 0]
            step = np.min(u[neg] / (u[neg] - z[neg]))
            u = u + step * (z - u)
            passive &= u > tol
            u[~passive] = 0.0
        else:
            return u, False
    return u, False


def project_gradient(g: np.ndarray, G: np.ndarray, margin: float = 0.0):
    """Closest direction to ``g`` with non-negative dot product against every row of ``G``.

    Solves the dual ``min_{v >= margin} 0.5 v'(GG')v + (Gg)'v`` and returns
    ``(g + G'v, converged)``.  A positive ``margin`` pushes the result further
    into the feasible cone.
    """
    G = np.atleast_2d(G)
    P = G @ G.T
    m = np.full(G.shape[0], float(margin))
    # shift v = u + m so the constraint becomes u >= 0
    q = G @ g + P @ m
    u, ok = solve_nonneg_qp(P, q)
    v = u + m
    return g + G.T @ v, ok
