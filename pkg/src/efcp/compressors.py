"""Gradient compressors and the error-feedback accumulator.

Two compressors are provided: blockwise Top-k sparsification, whose
output has the same number of entries in every block of a fixed size,
and a single-step power iteration that factors an unfolded tensor into
``P @ Q.T``. ``ErrorFeedback`` wraps either one and carries the
compression residual into the next step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .linalg import orthogonalize

DEFAULT_BLOCK_SIZE = 4096

_DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision):
    """Map ``'f32'``/``'f64'`` (or a numpy dtype) to a numpy float dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(_DTYPES[precision])
        except KeyError:
            raise ConfigError(f"unknown precision {precision!r}", field="precision") from None
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ConfigError(f"unsupported value dtype {dt}", field="precision")
    return dt


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def block_quotas(d, block_size, density):
    """Per-block entry counts for blockwise Top-k.

    Full blocks keep ``max(1, round(density * block_size))`` entries; the
    trailing partial block of width ``w`` keeps ``max(1, round(density * w))``.
    Rounding is half-up.
    """
    if d < 1:
        raise ConfigError(f"dimension must be >= 1, got {d}", field="d")
    if block_size < 1:
        raise ConfigError(f"block size must be >= 1, got {block_size}", field="block_size")
    if not (0.0 < density <= 1.0):
        raise ConfigError(f"density must be in (0, 1], got {density}", field="density")
    n_full, rem = divmod(d, block_size)
    full_quota = max(1, _round_half_up(density * block_size))
    quotas = [full_quota] * n_full
    if rem:
        quotas.append(max(1, _round_half_up(density * rem)))
    return np.asarray(quotas, dtype=np.int64)


@dataclass
class SparseCompressed:
    """Blockwise Top-k output: strictly increasing ``indices`` into ``[0, d)``."""

    indices: np.ndarray
    values: np.ndarray
    d: int
    block_size: int = DEFAULT_BLOCK_SIZE
    density: float | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.result_type(np.asarray(self.values), np.float32))
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise ShapeError("indices and values must be 1-D arrays of equal length")
        idx = self.indices
        if idx.size and (idx[0] < 0 or idx[-1] >= self.d or np.any(np.diff(idx) <= 0)):
            raise ShapeError(f"indices must be strictly increasing within [0, {self.d})")

    @property
    def nnz(self):
        return self.indices.size

    def densify(self, dtype=None):
        out = np.zeros(self.d, dtype=dtype or self.values.dtype)
        out[self.indices] = self.values
        return out


@dataclass
class LowRankCompressed:
    """Rank-``rho`` factorization ``P @ Q.T`` of a tensor unfolded to ``(p1, p_rest)``."""

    P: np.ndarray
    Q: np.ndarray
    shape: tuple

    @property
    def rank(self):
        return self.P.shape[1]

    def densify(self, dtype=None):
        out = (self.P @ self.Q.T).reshape(self.shape)
        return out.astype(dtype) if dtype is not None else out


def densify(c, dtype=None):
    """Dense array for a compressed value; plain arrays pass through."""
    if isinstance(c, (SparseCompressed, LowRankCompressed)):
        return c.densify(dtype)
    arr = np.asarray(c)
    return arr.astype(dtype) if dtype is not None else arr


def topk_block(a, density, block_size=DEFAULT_BLOCK_SIZE):
    """Keep the largest-magnitude entries of ``a`` block by block.

    Ties go to the lower index. Values are copied unchanged.
    """
    a = np.asarray(a)
    if a.ndim != 1:
        raise ShapeError(f"topk_block expects a vector, got shape {a.shape}")
    d = a.size
    quotas = block_quotas(d, block_size, density)
    mag = np.abs(a)
    n_full = d // block_size
    parts = []
    if n_full:
        kappa = int(quotas[0])
        blocks = mag[: n_full * block_size].reshape(n_full, block_size)
        # stable sort on -|a| puts the lower index first among equal magnitudes
        order = np.argsort(-blocks, axis=1, kind="stable")[:, :kappa]
        order.sort(axis=1)
        parts.append((order + (np.arange(n_full) * block_size)[:, None]).ravel())
    if d % block_size:
        start = n_full * block_size
        kappa = int(quotas[-1])
        order = np.argsort(-mag[start:], kind="stable")[:kappa]
        parts.append(np.sort(order) + start)
    idx = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    return SparseCompressed(idx, a[idx].copy(), d, block_size, density)


class TopKCompressor:
    """Callable wrapper around :func:`topk_block` with fixed parameters."""

    def __init__(self, density, block_size=DEFAULT_BLOCK_SIZE):
        block_quotas(1, block_size, density)  # validates
        self.density = density
        self.block_size = block_size

    def __call__(self, a):
        return topk_block(a, self.density, self.block_size)


class IdentityCompressor:
    """No compression; returns a copy of the input."""

    def __call__(self, a):
        return np.array(a, copy=True)


def _unfold(g):
    g = np.asarray(g)
    if g.ndim == 0:
        raise ShapeError("cannot unfold a scalar")
    p1 = g.shape[0]
    return g.reshape(p1, -1)


def power_compress(g, prev_q):
    """One step of warm-started power iteration on the unfolded tensor.

    ``P = orthogonalize(g~ @ prev_q)`` and ``Q = g~.T @ P``, so ``P @ Q.T``
    is the projection of ``g~`` onto the span of ``P``. Returns the
    compressed pair; the caller decides how to carry ``Q`` forward.
    """
    g = np.asarray(g, dtype=np.float64)
    mat = _unfold(g)
    prev_q = np.asarray(prev_q, dtype=np.float64)
    if prev_q.ndim != 2 or prev_q.shape[0] != mat.shape[1]:
        raise ShapeError(
            f"warm-start Q has shape {prev_q.shape}, unfolded gradient is {mat.shape}"
        )
    if prev_q.shape[1] > min(mat.shape):
        raise ShapeError(f"rank {prev_q.shape[1]} exceeds min{mat.shape}")
    p = orthogonalize(mat @ prev_q)
    q = mat.T @ p
    return LowRankCompressed(p, q, g.shape)


def effective_rank(shape, rank):
    mat_shape = (shape[0], int(np.prod(shape[1:], dtype=np.int64)) if len(shape) > 1 else 1)
    return max(1, min(rank, *mat_shape))


class PowerCompressor:
    """Per-tensor power-iteration compressor holding the warm-start ``Q``.

    The initial ``Q`` has i.i.d. standard normal entries drawn row by row
    from a seeded generator, so for a fixed seed the first ``r`` columns do
    not depend on the requested rank. After each call the warm start is
    the new ``Q``; columns that came out exactly zero (degenerate input)
    keep their previous values so the iteration can recover rank later.
    """

    def __init__(self, shape, rank, seed=0):
        self.shape = tuple(shape)
        p_rest = int(np.prod(self.shape[1:], dtype=np.int64)) if len(self.shape) > 1 else 1
        self.rank = effective_rank(self.shape, rank)
        rng = np.random.default_rng(seed)
        self.q = rng.standard_normal((self.rank, p_rest)).T.copy()

    def __call__(self, g):
        if tuple(np.shape(g)) != self.shape:
            raise ShapeError(f"expected tensor of shape {self.shape}, got {np.shape(g)}")
        out = power_compress(g, self.q)
        dead = ~np.any(out.Q != 0.0, axis=0)
        new_q = out.Q.copy()
        new_q[:, dead] = self.q[:, dead]
        self.q = new_q
        return out


@dataclass
class ErrorFeedback:
    """Error-feedback accumulator ``xi``.

    Each step forms ``a = xi + g``, compresses it and stores
    ``xi = a - densify(c)``. ``xi`` lives in ``dtype``; the incoming
    gradient is cast to it first so the residual identity holds exactly
    for sparse compressors.
    """

    shape: tuple
    dtype: np.dtype = np.dtype(np.float32)
    enabled: bool = True
    xi: np.ndarray = field(init=False)

    def __post_init__(self):
        if isinstance(self.shape, (int, np.integer)):
            self.shape = (int(self.shape),)
        self.shape = tuple(self.shape)
        self.dtype = np.dtype(self.dtype)
        self.xi = np.zeros(self.shape, dtype=self.dtype)

    def step(self, g, compress):
        g = np.asarray(g)
        if g.shape != self.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match error state {self.shape}")
        a = self.xi + g.astype(self.dtype) if self.enabled else g.astype(self.dtype)
        c = compress(a)
        if self.enabled:
            self.xi = a - densify(c, self.dtype).reshape(self.shape)
        return c

    def norm(self):
        return float(np.linalg.norm(self.xi.astype(np.float64)))


def ef_step(state, g, compress):
    """Functional alias for :meth:`ErrorFeedback.step`."""
    return state.step(g, compress)
