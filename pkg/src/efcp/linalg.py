"""Small dense linear algebra used by the preconditioners.

Only what the m x m side of the algorithms needs: a symmetric
eigensolver (cyclic Jacobi) and column orthogonalization (modified
Gram-Schmidt). Matrix products go through numpy.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import NumericalBreakdown, ShapeError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-12
ORTHO_TOL = 1e-12


class EigenDecomposition(NamedTuple):
    """Eigenvalues sorted descending; ``vectors[:, j]`` pairs with ``values[j]``."""

    values: np.ndarray
    vectors: np.ndarray


@njit(cache=True)
def _off_norm(a):
    n = a.shape[0]
    s = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                s += a[i, j] * a[i, j]
    return np.sqrt(s)


@njit(cache=True)
def _jacobi(a, tol, max_sweeps):
    # a is overwritten; returns (diag, vectors, sweeps used, converged)
    n = a.shape[0]
    v = np.eye(n)
    fro = np.sqrt(np.sum(a * a))
    threshold = tol * fro
    sweeps = 0
    converged = _off_norm(a) <= threshold
    while not converged and sweeps < max_sweeps:
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                # exact zero for the annihilated pair keeps the iteration symmetric
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
        sweeps += 1
        converged = _off_norm(a) <= threshold
    diag = np.empty(n)
    for i in range(n):
        diag[i] = a[i, i]
    return diag, v, sweeps, converged


def sym_eig(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Iterates row-cyclic sweeps until the off-diagonal Frobenius norm drops
    below ``tol * ||A||_F``. Eigenvectors are sign-normalized so that the
    entry of largest magnitude in each column is positive, which makes the
    output a deterministic function of the input.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ShapeError(f"sym_eig needs a non-empty square matrix, got shape {a.shape}")
    asym = np.max(np.abs(a - a.T))
    if asym > SYMMETRY_TOL:
        raise ShapeError(f"sym_eig input is not symmetric (max |A - A^T| = {asym:.3e})")
    if not np.all(np.isfinite(a)):
        raise NumericalBreakdown("sym_eig input has non-finite entries")
    a = 0.5 * (a + a.T)
    diag, vecs, _, converged = _jacobi(a, tol, max_sweeps)
    if not converged:
        raise NumericalBreakdown(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
    order = np.argsort(-diag, kind="stable")
    values = diag[order]
    vecs = vecs[:, order]
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return EigenDecomposition(values, vecs * signs)


def orthogonalize(p, tol=ORTHO_TOL):
    """Orthonormalize the columns of ``p`` with modified Gram-Schmidt.

    Each column is projected twice against the accepted ones. A column whose
    residual falls below ``tol`` relative to its input norm (or is exactly
    zero) is emitted as a zero column, so rank-deficient inputs come back
    with orthonormal non-zero columns plus zeros.
    """
    p = np.array(p, dtype=np.float64, copy=True)
    if p.ndim != 2:
        raise ShapeError(f"orthogonalize expects a matrix, got shape {p.shape}")
    n, rho = p.shape
    out = np.zeros_like(p)
    kept = []
    for j in range(rho):
        col = p[:, j].copy()
        norm0 = np.linalg.norm(col)
        if norm0 == 0.0:
            continue
        for _ in range(2):
            for i in kept:
                col -= (out[:, i] @ col) * out[:, i]
        resid = np.linalg.norm(col)
        if resid < tol * norm0 or resid == 0.0:
            continue
        out[:, j] = col / resid
        kept.append(j)
    return out
