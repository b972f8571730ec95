"""M-FAC inverse empirical-Fisher products over a gradient window.

The damped empirical Fisher of the window is

    F = lambda * I + (1/m) * sum_k g_k g_k^T

and its inverse is built by adding the gradients one at a time with
Sherman-Morrison. With ``p_t = F_{t-1}^{-1} g_t`` and
``sigma_t = m + g_t^T p_t``,

    F^{-1} x = x / lambda - sum_t p_t (p_t^T x) / sigma_t.

Every ``p_t`` is a combination of the gradients, ``p_t = sum_j B[t, j] g_j``
with ``B`` lower triangular, and ``B`` only depends on the Gram matrix
``S = G G^T``. So one SP call gives ``G x``, a few m x m products give the
coefficient vector, and one LCG call forms the result.
"""
from __future__ import annotations

import numpy as np

from .compressors import densify
from .errors import ConfigError, NumericalBreakdown, ShapeError


def recompute_coefficients(S, lam, m):
    """Coefficient table ``B`` and denominators ``sigma`` for Gram matrix ``S``.

    ``S`` must be ordered by logical age (oldest first). Row ``t`` of the
    returned lower-triangular ``B`` expands ``F_{t-1}^{-1} g_t`` in the
    stored gradients; ``m`` is the fixed window size used in the
    Sherman-Morrison denominator, even while the window is filling.
    """
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    B = np.zeros((n, n))
    sigma = np.zeros(n)
    inv_lam = 1.0 / lam
    for t in range(n):
        if t:
            # q[s] = p_s^T g_t for s < t
            q = B[:t, :t] @ S[:t, t]
            B[t, :t] = -(q / sigma[:t]) @ B[:t, :t]
        B[t, t] = inv_lam
        sigma[t] = m + B[t, : t + 1] @ S[: t + 1, t]
        if not sigma[t] > 0.0:
            raise NumericalBreakdown(
                f"non-positive Sherman-Morrison denominator at position {t}: {sigma[t]!r}"
            )
    return B, sigma


def combination_weights(B, sigma, dots):
    """Weights ``w`` with ``F^{-1} x = x / lambda - sum_j w_j g_j``.

    ``dots[j] = g_j^T x`` in logical-age order.
    """
    z = (B @ dots) / sigma
    return B.T @ z


class MFAC:
    """M-FAC preconditioner backed by a sparse or dense gradient window.

    Internals (Gram matrix, coefficients) are kept in float64 whatever the
    window's value precision. ``S`` is stored in physical row order; use
    :attr:`S_logical` for the oldest-first view.
    """

    def __init__(self, window, lam):
        if not lam > 0:
            raise ConfigError(f"damping must be positive, got {lam}", field="lambda")
        self.window = window
        self.lam = float(lam)
        self.m = window.m
        self.d = window.d
        self.S = np.zeros((self.m, self.m))
        self.coeff = np.zeros((0, 0))
        self.sigma = np.zeros(0)

    @property
    def filled(self):
        return self.window.filled

    @property
    def S_logical(self):
        order = self.window.age_order
        return self.S[np.ix_(order, order)]

    def update(self, c):
        """Insert compressed gradient ``c`` and refresh the coefficient table."""
        row, _ = self.window.set_row(c)
        # dot products against what was actually stored (values may be rounded)
        g = self.window.row_dense(row)
        delta = self.window.sp(g)
        self.S[row, :] = delta
        self.S[:, row] = delta
        self.coeff, self.sigma = recompute_coefficients(self.S_logical, self.lam, self.m)

    def coefficients_for(self, dots):
        """Map physical-order dot products ``G x`` to LCG coefficients.

        ``F^{-1} x = x / lambda - lcg(result)``.
        """
        order = self.window.age_order
        y = np.asarray(dots, dtype=np.float64)[order]
        out = np.zeros(self.m)
        out[order] = combination_weights(self.coeff, self.sigma, y)
        return out

    def precondition(self, x):
        x = np.asarray(densify(x), dtype=np.float64)
        if x.shape != (self.d,):
            raise ShapeError(f"expected a vector of length {self.d}, got {x.shape}")
        if self.filled == 0:
            return x / self.lam
        c = self.coefficients_for(self.window.sp(x))
        return x / self.lam - self.window.lcg(c)

    def step(self, c):
        """Insert ``c`` and return its preconditioned direction."""
        self.update(c)
        return self.precondition(c)


def mfac_update(state, c):
    state.update(c)


def mfac_precondition(state, x):
    return state.precondition(x)
