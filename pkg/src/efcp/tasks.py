"""Small differentiable test problems with analytic gradients.

All tasks expose the same surface: ``d``, ``layer_shapes``, ``init_theta()``,
``loss(theta, batch)``, ``grad(theta, batch)``, ``split(theta)`` and
``join(parts)``. ``batch`` is a step index (mini-batch selector) or
``None`` for the full objective.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EfcpError


class NonFiniteParameters(EfcpError, ValueError):
    pass


def _check_theta(theta, d):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (d,):
        raise ConfigError(f"parameter vector has shape {theta.shape}, expected ({d},)")
    if not np.all(np.isfinite(theta)):
        raise NonFiniteParameters("parameters contain NaN or inf")
    return theta


class _FlatLayout:
    """Flat <-> per-layer views for a list of tensor shapes."""

    layer_shapes: list

    @property
    def d(self):
        return int(sum(int(np.prod(s)) for s in self.layer_shapes))

    def split(self, theta):
        parts, pos = [], 0
        for s in self.layer_shapes:
            n = int(np.prod(s))
            parts.append(theta[pos : pos + n].reshape(s))
            pos += n
        return parts

    def join(self, parts):
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


class _Batched:
    """Sequential mini-batches, reshuffled each epoch from ``(seed, epoch)``."""

    n: int
    batch_size: int | None
    seed: int

    def batch_indices(self, batch):
        if batch is None or self.batch_size is None or self.batch_size >= self.n:
            return slice(None)
        per_epoch = self.n // self.batch_size
        epoch, i = divmod(int(batch), per_epoch)
        perm = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        return perm[i * self.batch_size : (i + 1) * self.batch_size]


@dataclass
class QuadraticTask(_FlatLayout):
    """``L(theta) = 0.5 (theta - theta*)^T A (theta - theta*)`` with optional gradient noise."""

    A: np.ndarray
    theta_star: np.ndarray
    noise_std: float = 0.0
    seed: int = 0
    layer_shapes: list = field(init=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.theta_star = np.asarray(self.theta_star, dtype=np.float64)
        self.layer_shapes = [(self.theta_star.size,)]

    def init_theta(self):
        return np.zeros(self.d)

    def loss(self, theta, batch=None):
        r = _check_theta(theta, self.d) - self.theta_star
        return float(0.5 * r @ self.A @ r)

    def grad(self, theta, batch=None):
        r = _check_theta(theta, self.d) - self.theta_star
        g = self.A @ r
        if self.noise_std > 0 and batch is not None:
            g = g + self.noise_std * np.random.default_rng([self.seed, int(batch)]).standard_normal(self.d)
        return g


@dataclass
class LogisticTask(_FlatLayout, _Batched):
    """Binary logistic regression without intercept, mean negative log-likelihood."""

    X: np.ndarray
    y: np.ndarray
    batch_size: int | None = None
    seed: int = 0
    layer_shapes: list = field(init=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if not np.all(np.isfinite(self.X)):
            raise ConfigError("features contain non-finite values")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ConfigError("logistic labels must be 0 or 1")
        self.n = self.X.shape[0]
        self.layer_shapes = [(self.X.shape[1],)]

    def init_theta(self):
        return np.zeros(self.d)

    def loss(self, theta, batch=None):
        theta = _check_theta(theta, self.d)
        sel = self.batch_indices(batch)
        z = self.X[sel] @ theta
        return float(np.mean(np.logaddexp(0.0, z) - self.y[sel] * z))

    def grad(self, theta, batch=None):
        theta = _check_theta(theta, self.d)
        sel = self.batch_indices(batch)
        X = self.X[sel]
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ theta)))
        return X.T @ (p - self.y[sel]) / X.shape[0]


@dataclass
class MlpTask(_FlatLayout, _Batched):
    """One-hidden-layer tanh network with softmax cross-entropy.

    Parameters are ordered ``W1 (h, d_in), b1 (h,), W2 (c, h), b2 (c,)``.
    """

    X: np.ndarray
    y: np.ndarray
    hidden: int = 16
    n_classes: int | None = None
    batch_size: int | None = None
    seed: int = 0
    layer_shapes: list = field(init=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y).astype(np.int64)
        self.n, d_in = self.X.shape
        if self.n_classes is None:
            self.n_classes = int(self.y.max()) + 1
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ConfigError("class labels out of range")
        h, c = self.hidden, self.n_classes
        self.layer_shapes = [(h, d_in), (h,), (c, h), (c,)]

    def init_theta(self):
        rng = np.random.default_rng([self.seed, 1])
        parts = []
        for s in self.layer_shapes:
            if len(s) == 2:
                parts.append(rng.standard_normal(s) / np.sqrt(s[1]))
            else:
                parts.append(np.zeros(s))
        return self.join(parts)

    def _forward(self, theta, batch):
        W1, b1, W2, b2 = self.split(_check_theta(theta, self.d))
        sel = self.batch_indices(batch)
        X, y = self.X[sel], self.y[sel]
        a = np.tanh(X @ W1.T + b1)
        logits = a @ W2.T + b2
        logits = logits - logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return X, y, a, logp, W2

    def loss(self, theta, batch=None):
        _, y, _, logp, _ = self._forward(theta, batch)
        return float(-np.mean(logp[np.arange(y.size), y]))

    def grad(self, theta, batch=None):
        X, y, a, logp, W2 = self._forward(theta, batch)
        n = y.size
        dlogits = np.exp(logp)
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        gW2 = dlogits.T @ a
        gb2 = dlogits.sum(axis=0)
        dz = (dlogits @ W2) * (1.0 - a * a)
        gW1 = dz.T @ X
        gb1 = dz.sum(axis=0)
        return self.join([gW1, gb1, gW2, gb2])


def make_synthetic(kind, d, n=2000, seed=0, **kwargs):
    """Deterministic synthetic task of the given kind.

    ``quadratic``: ``A = B B^T + 0.1 I`` with Gaussian ``B``, ``theta*``
    Gaussian. ``logistic``: points around a random unit direction with a
    class gap of 1.0 along it. ``mlp``: ``d`` input features, Gaussian
    class clusters (``n_classes`` default 3).
    """
    if d <= 0 or n <= 0:
        raise ConfigError(f"d and n must be positive (got d={d}, n={n})")
    rng = np.random.default_rng([seed, 0])
    if kind == "quadratic":
        B = rng.standard_normal((d, d))
        A = B @ B.T + 0.1 * np.eye(d)
        return QuadraticTask(A, rng.standard_normal(d), kwargs.get("noise_std", 0.0), seed)
    if kind == "logistic":
        w = rng.standard_normal(d)
        w /= np.linalg.norm(w)
        Z = rng.standard_normal((n, d))
        t = Z @ w
        side = np.where(t > 0, 1.0, -1.0)
        X = Z + 0.5 * side[:, None] * w[None, :]
        y = (side > 0).astype(np.float64)
        return LogisticTask(X, y, kwargs.get("batch_size"), seed)
    if kind == "mlp":
        n_classes = kwargs.get("n_classes", 3)
        means = 2.0 * rng.standard_normal((n_classes, d))
        y = rng.integers(0, n_classes, size=n)
        X = means[y] + rng.standard_normal((n, d))
        return MlpTask(X, y, kwargs.get("hidden", 16), n_classes, kwargs.get("batch_size"), seed)
    raise ConfigError(f"unknown task kind {kind!r}", field="task")


def load_csv(path, batch_size=None, seed=0, hidden=16):
    """Task from a CSV file with a header row and a ``label`` column.

    Binary 0/1 labels give a :class:`LogisticTask`; anything else an
    :class:`MlpTask` with classes re-indexed to ``0..C-1``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty CSV file") from None
        if "label" not in header:
            raise ConfigError(f"{path}: no 'label' column in header")
        li = header.index("label")
        rows = [r for r in reader if r]
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric value ({exc})") from None
    labels = data[:, li]
    X = np.delete(data, li, axis=1)
    if np.all((labels == 0) | (labels == 1)):
        return LogisticTask(X, labels, batch_size, seed)
    classes, y = np.unique(labels, return_inverse=True)
    return MlpTask(X, y, hidden, classes.size, batch_size, seed)


def finite_difference_grad(task, theta, coords, batch=None, h=1e-5):
    """Central differences of ``task.loss`` at the selected coordinates."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty(len(coords))
    for i, j in enumerate(coords):
        e = np.zeros_like(theta)
        e[j] = h
        out[i] = (task.loss(theta + e, batch) - task.loss(theta - e, batch)) / (2 * h)
    return out
