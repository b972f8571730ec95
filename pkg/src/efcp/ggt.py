"""GGT full-matrix adaptive preconditioning over a gradient window.

Applies ``(eps * I + (G^T G)^{1/2})^{-1}`` to a vector without forming any
d x d matrix: the m x m Gram matrix ``G G^T = W diag(s^2) W^T`` gives the
left singular directions ``U_j = G^T W_j / s_j`` of ``G^T``, and

    u = x / eps + sum_j (1 / (s_j + eps) - 1 / eps) U_j (U_j^T x)

over the retained singular values. ``U_j^T x = W_j^T (G x) / s_j``, so a
single SP call and a single LCG call suffice.
"""
from __future__ import annotations

import numpy as np

from .compressors import densify
from .errors import ConfigError, ShapeError
from .linalg import EigenDecomposition, sym_eig

DEFAULT_WINDOW = 100
SV_THRESHOLD = 1e-7


class GGT:
    """GGT preconditioner on a sparse or dense window.

    ``sv_threshold`` drops singular values below ``sv_threshold * s_max``
    (pseudo-inverse cutoff). The Gram matrix is not normalized by ``m``.
    """

    def __init__(self, window, eps, sv_threshold=SV_THRESHOLD):
        if not eps > 0:
            raise ConfigError(f"eps must be positive, got {eps}", field="eps")
        self.window = window
        self.eps = float(eps)
        self.sv_threshold = float(sv_threshold)
        self.m = window.m
        self.d = window.d
        self.S = np.zeros((self.m, self.m))
        self.eig = EigenDecomposition(np.zeros(0), np.zeros((0, 0)))

    @property
    def filled(self):
        return self.window.filled

    def update(self, c):
        row, _ = self.window.set_row(c)
        delta = self.window.sp(self.window.row_dense(row))
        self.S[row, :] = delta
        self.S[:, row] = delta
        n = self.filled
        # occupied rows are the physical prefix 0..n-1
        self.eig = sym_eig(self.S[:n, :n])

    def singular_values(self):
        return np.sqrt(np.clip(self.eig.values, 0.0, None))

    def precondition(self, x):
        x = np.asarray(densify(x), dtype=np.float64)
        if x.shape != (self.d,):
            raise ShapeError(f"expected a vector of length {self.d}, got {x.shape}")
        out = x / self.eps
        if self.filled == 0:
            return out
        s = self.singular_values()
        if s.size == 0 or s[0] == 0.0:
            return out
        keep = s > self.sv_threshold * s[0]
        s = s[keep]
        W = self.eig.vectors[:, keep]
        n = self.filled
        dots = self.window.sp(x)[:n]
        proj = (W.T @ dots) / s  # U_j^T x
        scale = 1.0 / (s + self.eps) - 1.0 / self.eps
        coeffs = np.zeros(self.m)
        coeffs[:n] = W @ (scale * proj / s)
        return out + self.window.lcg(coeffs)

    def step(self, c):
        self.update(c)
        return self.precondition(c)


def ggt_update(state, c):
    state.update(c)


def ggt_precondition(state, a):
    return state.precondition(a)
