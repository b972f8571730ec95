"""Brute-force reference computations.

Everything here works on dense d-dimensional objects and shares no code
path with the window kernels or the m x m reformulations it is used to
check.
"""
from __future__ import annotations

import numpy as np


def sequential_matvec(G, x):
    """``G @ x`` summed strictly left to right in float64."""
    G = np.asarray(G, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(G.shape[0])
    for r in range(G.shape[0]):
        out[r] = np.add.accumulate(G[r] * x)[-1] if G.shape[1] else 0.0
    return out


def sequential_rmatvec(G, c, row_order):
    """``sum_r c[r] * G[r]`` accumulated over ``row_order`` one row at a time."""
    G = np.asarray(G, dtype=np.float64)
    out = np.zeros(G.shape[1])
    for r in row_order:
        out = out + c[r] * G[r]
    return out


def topk_by_sorting(block, kappa):
    """Positions of the ``kappa`` largest |values|, ties to the lower position."""
    ranked = sorted(range(len(block)), key=lambda i: (-abs(float(block[i])), i))
    return sorted(ranked[:kappa])


def fisher_inverse_apply(grads, lam, m, x):
    """Solve ``(lam I + (1/m) sum g g^T) y = x`` with a dense d x d matrix."""
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    d = grads.shape[1]
    F = lam * np.eye(d) + grads.T @ grads / m
    return np.linalg.solve(F, np.asarray(x, dtype=np.float64))


def sherman_morrison_one(g, lam, m, x):
    """Closed form for a single stored gradient."""
    g = np.asarray(g, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return x / lam - (g @ x) / (lam**2 * (m + g @ g / lam)) * g


def ggt_spectral_apply(grads, eps, x):
    """``(eps I + (sum g g^T)^{1/2})^{-1} x`` via a d x d eigendecomposition.

    Eigenvalues below the usual numerical-rank tolerance
    ``d * machine_eps * max_eigenvalue`` are taken as exact zeros.
    """
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    d = grads.shape[1]
    M = grads.T @ grads
    vals, vecs = np.linalg.eigh(M)
    top = vals.max() if vals.size else 0.0
    vals = np.where(vals < d * np.finfo(np.float64).eps * max(top, 0.0), 0.0, vals)
    return vecs @ ((vecs.T @ np.asarray(x, dtype=np.float64)) / (eps + np.sqrt(vals)))


def frobenius(a, b):
    return float(np.sum(np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)))


def relative_error(out, ref):
    ref = np.asarray(ref, dtype=np.float64)
    denom = np.linalg.norm(ref)
    diff = np.linalg.norm(np.asarray(out, dtype=np.float64) - ref)
    return diff / denom if denom > 0 else diff
