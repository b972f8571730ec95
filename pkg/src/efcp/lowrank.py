"""Low-rank M-FAC: per-layer power-iteration factors sharing one M-FAC state.

Each layer gradient is unfolded to a matrix and compressed to ``P @ Q.T``.
Inner products between stored gradients never touch full tensors:

    <P_a Q_a^T, P_b Q_b^T>_F = sum((P_b^T P_a) * (Q_b^T Q_a))

and summing those over layers gives the inner product of the concatenated
model gradients. The M-FAC weights are computed once from the aggregated
Gram matrix and applied to every layer.

Sign convention: the update is ``u = P Q^T / lambda - sum_tau c_tau g_tau``.
"""
from __future__ import annotations

import numpy as np

from .compressors import ErrorFeedback, LowRankCompressed, PowerCompressor
from .errors import ConfigError, ShapeError
from .mfac import combination_weights, recompute_coefficients
from .window import RingCursor


def lr_inner_product(a, b):
    """Frobenius inner product of two low-rank factorizations."""
    if a.P.shape[0] != b.P.shape[0] or a.Q.shape[0] != b.Q.shape[0]:
        raise ShapeError(
            f"unfolded shapes differ: {(a.P.shape[0], a.Q.shape[0])} vs {(b.P.shape[0], b.Q.shape[0])}"
        )
    return float(np.sum((b.P.T @ a.P) * (b.Q.T @ a.Q)))


class LowRankMFAC:
    """Layerwise low-rank compression feeding a global M-FAC preconditioner.

    ``shapes`` lists the parameter tensor shapes; 1-D tensors are treated as
    ``(p1, 1)`` matrices. With ``error_feedback`` on, each layer keeps its
    own residual.
    """

    def __init__(self, shapes, m, lam, rank, seed=0, error_feedback=True):
        if not lam > 0:
            raise ConfigError(f"damping must be positive, got {lam}", field="lambda")
        if rank < 1:
            raise ConfigError(f"rank must be >= 1, got {rank}", field="rank")
        self.shapes = [tuple(s) for s in shapes]
        self.m = int(m)
        self.lam = float(lam)
        self.ring = RingCursor(self.m)
        self.compressors = [
            PowerCompressor(s, rank, seed=seed + 7919 * i) for i, s in enumerate(self.shapes)
        ]
        self.ef = [
            ErrorFeedback(s, np.float64, enabled=error_feedback) for s in self.shapes
        ]
        self.buffers = [[None] * self.m for _ in self.shapes]
        self.S = np.zeros((self.m, self.m))
        self.coeff = np.zeros((0, 0))
        self.sigma = np.zeros(0)

    @property
    def filled(self):
        return self.ring.filled

    @property
    def S_logical(self):
        order = self.ring.age_order
        return self.S[np.ix_(order, order)]

    def ef_norm(self):
        return float(np.sqrt(sum(e.norm() ** 2 for e in self.ef)))

    def compress(self, grads):
        if len(grads) != len(self.shapes):
            raise ShapeError(f"expected {len(self.shapes)} layer gradients, got {len(grads)}")
        out = []
        for g, shape, ef, comp in zip(grads, self.shapes, self.ef, self.compressors):
            if np.shape(g) != shape:
                raise ShapeError(f"layer gradient shape {np.shape(g)} != {shape}")
            out.append(ef.step(np.asarray(g, dtype=np.float64), comp))
        return out

    def update(self, factors):
        """Insert one compressed gradient (list of per-layer factor pairs)."""
        row, _ = self.ring._advance()
        for buf, f in zip(self.buffers, factors):
            buf[row] = f
        n = self.filled
        delta = np.zeros(self.m)
        for buf, f in zip(self.buffers, factors):
            for r in range(n):
                delta[r] += lr_inner_product(buf[r], f)
        self.S[row, :] = delta
        self.S[:, row] = delta
        self.coeff, self.sigma = recompute_coefficients(self.S_logical, self.lam, self.m)
        return row, delta

    def precondition_current(self, factors, delta):
        """Per-layer ``F^{-1}`` applied to the just-inserted gradient."""
        order = self.ring.age_order
        w = np.zeros(self.m)
        w[order] = combination_weights(self.coeff, self.sigma, delta[order])
        updates = []
        for buf, f in zip(self.buffers, factors):
            u = (f.P @ f.Q.T) / self.lam
            for r in order:
                stored = buf[r]
                u -= w[r] * (stored.P @ stored.Q.T)
            updates.append(u.reshape(f.shape))
        return updates

    def step(self, grads):
        """Compress, insert and precondition one per-layer gradient list."""
        factors = self.compress(grads)
        _, delta = self.update(factors)
        return self.precondition_current(factors, delta)


def lrmfac_step(state, grads):
    return state.step(grads)


def reconstruct(f: LowRankCompressed):
    return f.densify()
