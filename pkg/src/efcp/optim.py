"""Training loop: error-feedback compressed preconditioning plus baselines.

Every optimizer here produces a direction ``u_t`` from the gradient; the
parameter update is shared and applies decoupled weight decay:

    theta <- (1 - wd * lr_t) * theta - lr_t * u_t
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .compressors import (
    DEFAULT_BLOCK_SIZE,
    ErrorFeedback,
    IdentityCompressor,
    TopKCompressor,
    block_quotas,
    densify,
    resolve_dtype,
)
from .errors import ConfigError, DivergenceError, NumericalBreakdown
from .ggt import GGT
from .lowrank import LowRankMFAC
from .mfac import MFAC
from .tasks import load_csv, make_synthetic
from .window import DenseGradWindow, SparseGradWindow, dense_memory_bytes, sparse_memory_bytes

OPTIMIZERS = ("sgd", "adam", "dmfac", "smfac", "lrmfac", "dggt", "sggt")
SCHEDULES = ("constant", "linear")

# Chosen on the default quadratic demo (d=50, seed 1, 200 steps); other
# tasks generally need their own sweep.
DEFAULT_LR = {
    "sgd": 0.01,
    "adam": 0.01,
    "dmfac": 1e-3,
    "smfac": 10.0,
    "lrmfac": 1e-3,
    "dggt": 1.0,
    "sggt": 1.0,
}


@dataclass
class RunConfig:
    task: str = "quadratic"
    opt: str = "smfac"
    steps: int = 200
    lr: float | None = None
    schedule: str = "constant"
    wd: float = 0.0
    m: int = 32
    density: float = 0.01
    rank: int = 4
    block: int = DEFAULT_BLOCK_SIZE
    lam: float = 1e-4
    eps: float = 1e-5
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    error_feedback: bool = True
    clip: float | None = None
    d: int = 50
    n: int = 2000
    hidden: int = 16
    noise_std: float = 0.0
    batch_size: int | None = None
    seed: int = 1
    precision: str = "f32"
    threads: int = 1
    timing: bool = False

    def resolved(self):
        """Copy with defaults that depend on the optimizer filled in, validated."""
        cfg = RunConfig(**asdict(self))
        cfg.betas = tuple(cfg.betas)
        if cfg.lr is None:
            cfg.lr = DEFAULT_LR.get(cfg.opt, 1e-3)
        cfg.validate()
        return cfg

    def validate(self):
        def bad(name, msg):
            raise ConfigError(f"--{name.replace('_', '-')}: {msg}", field=name)

        if self.opt not in OPTIMIZERS:
            bad("opt", f"unknown optimizer {self.opt!r}; choose from {', '.join(OPTIMIZERS)}")
        if not (self.task in ("quadratic", "logistic", "mlp") or self.task.startswith("csv:")):
            bad("task", f"unknown task {self.task!r}")
        if self.schedule not in SCHEDULES:
            bad("schedule", f"unknown schedule {self.schedule!r}")
        if self.steps < 1:
            bad("steps", "must be >= 1")
        if self.lr is not None and not self.lr > 0:
            bad("lr", "must be positive")
        if self.wd < 0:
            bad("wd", "must be >= 0")
        if self.threads < 1:
            bad("threads", "must be >= 1")
        if self.precision not in ("f32", "f64"):
            bad("precision", "must be f32 or f64")
        if self.d < 1 or self.n < 1:
            bad("d" if self.d < 1 else "n", "must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            bad("batch_size", "must be positive")
        if self.clip is not None and not self.clip > 0:
            bad("clip", "must be positive")
        if self.opt in ("dmfac", "smfac", "lrmfac", "dggt", "sggt") and self.m < 1:
            bad("m", "must be >= 1")
        if self.opt in ("smfac", "sggt"):
            if not (0.0 < self.density <= 1.0):
                bad("density", f"must be in (0, 1], got {self.density}")
            if self.block < 1:
                bad("block", "must be >= 1")
        if self.opt in ("dmfac", "smfac", "lrmfac") and not self.lam > 0:
            bad("lambda", "must be positive")
        if self.opt in ("dggt", "sggt") and not self.eps > 0:
            bad("eps", "must be positive")
        if self.opt == "lrmfac" and self.rank < 1:
            bad("rank", "must be >= 1")
        if self.opt == "sgd" and not (0.0 <= self.momentum < 1.0):
            bad("momentum", "must be in [0, 1)")
        if self.opt == "adam":
            b1, b2 = self.betas
            if not (0 <= b1 < 1 and 0 <= b2 < 1):
                bad("betas", "must be in [0, 1)")
            if not self.adam_eps > 0:
                bad("adam_eps", "must be positive")

    def to_json(self):
        data = asdict(self)
        data["lambda"] = data.pop("lam")
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)


@dataclass
class StepRecord:
    t: int
    loss: float
    grad_norm: float
    upd_norm: float
    ef_norm: float
    ms: float

    def to_json(self):
        """One JSON line; non-finite values (diverged steps only) become null."""

        def num(v):
            return v if math.isfinite(v) else None

        return json.dumps(
            {
                "t": self.t,
                "loss": num(self.loss),
                "grad_norm": num(self.grad_norm),
                "upd_norm": num(self.upd_norm),
                "ef_norm": num(self.ef_norm),
                "ms": num(self.ms),
            }
        )


class IdentityPreconditioner:
    def step(self, c):
        return np.asarray(densify(c), dtype=np.float64)


class EFCP:
    """Error feedback + compressor + preconditioner, acting on flat vectors."""

    def __init__(self, preconditioner, compressor=None, dtype=np.float64, d=None, error_feedback=True):
        self.preconditioner = preconditioner
        self.compressor = compressor or IdentityCompressor()
        d = d if d is not None else preconditioner.d
        self.ef = ErrorFeedback(d, dtype, enabled=error_feedback)

    def direction(self, g):
        c = self.ef.step(g, self.compressor)
        return self.preconditioner.step(c)

    def ef_norm(self):
        return self.ef.norm()


class LowRankEFCP:
    """Adapter running :class:`LowRankMFAC` on a task's per-layer views."""

    def __init__(self, task, m, lam, rank, seed=0, error_feedback=True):
        self.task = task
        self.inner = LowRankMFAC(task.layer_shapes, m, lam, rank, seed, error_feedback)

    def direction(self, g):
        return self.task.join(self.inner.step(self.task.split(g)))

    def ef_norm(self):
        return self.inner.ef_norm()


class SGDMomentum:
    def __init__(self, d, momentum=0.9):
        self.momentum = momentum
        self.buf = np.zeros(d)

    def direction(self, g):
        self.buf = self.momentum * self.buf + g
        return self.buf

    def ef_norm(self):
        return 0.0


class Adam:
    def __init__(self, d, betas=(0.9, 0.999), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m1 = np.zeros(d)
        self.m2 = np.zeros(d)
        self.t = 0

    def direction(self, g):
        self.t += 1
        self.m1 = self.b1 * self.m1 + (1 - self.b1) * g
        self.m2 = self.b2 * self.m2 + (1 - self.b2) * g * g
        m_hat = self.m1 / (1 - self.b1**self.t)
        v_hat = self.m2 / (1 - self.b2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)

    def ef_norm(self):
        return 0.0


def apply_update(theta, u, lr, wd=0.0):
    """Decoupled weight decay followed by the step along ``-u``."""
    return (1.0 - wd * lr) * theta - lr * u


def efcp_step(opt, theta, g, lr, wd=0.0, clip=None):
    """One optimizer step; returns ``(theta_next, u)``."""
    u = opt.direction(np.asarray(g, dtype=np.float64))
    if clip is not None:
        norm = np.linalg.norm(u)
        if norm > clip:
            u = u * (clip / norm)
    return apply_update(theta, u, lr, wd), u


def sgd_momentum_step(theta, g, state, lr, wd=0.0):
    return efcp_step(state, theta, g, lr, wd)[0]


def adam_step(theta, g, state, lr, wd=0.0):
    return efcp_step(state, theta, g, lr, wd)[0]


def build_task(cfg):
    if cfg.task.startswith("csv:"):
        return load_csv(cfg.task[4:], cfg.batch_size, cfg.seed, cfg.hidden)
    if cfg.task == "quadratic":
        return make_synthetic("quadratic", cfg.d, cfg.n, cfg.seed, noise_std=cfg.noise_std)
    if cfg.task == "logistic":
        return make_synthetic("logistic", cfg.d, cfg.n, cfg.seed, batch_size=cfg.batch_size)
    return make_synthetic("mlp", cfg.d, cfg.n, cfg.seed, batch_size=cfg.batch_size, hidden=cfg.hidden)


def build_optimizer(cfg, task):
    d = task.d
    dtype = resolve_dtype(cfg.precision)
    if cfg.opt == "sgd":
        return SGDMomentum(d, cfg.momentum)
    if cfg.opt == "adam":
        return Adam(d, cfg.betas, cfg.adam_eps)
    if cfg.opt == "lrmfac":
        return LowRankEFCP(task, cfg.m, cfg.lam, cfg.rank, cfg.seed, cfg.error_feedback)
    if cfg.opt in ("smfac", "sggt"):
        window = SparseGradWindow(cfg.m, d, cfg.density, cfg.block, dtype, cfg.threads)
        compressor = TopKCompressor(cfg.density, cfg.block)
    else:
        window = DenseGradWindow(cfg.m, d, dtype, cfg.threads)
        compressor = IdentityCompressor()
    pre = MFAC(window, cfg.lam) if cfg.opt.endswith("mfac") else GGT(window, cfg.eps)
    return EFCP(pre, compressor, dtype, d, cfg.error_feedback)


def learning_rate(cfg, t):
    if cfg.schedule == "linear":
        return cfg.lr * (1.0 - t / cfg.steps)
    return cfg.lr


def memory_report(cfg, task):
    """Byte accounting of the optimizer state against a dense fp32 window."""
    d = task.d
    m = cfg.m
    vb = resolve_dtype(cfg.precision).itemsize
    report = {"opt": cfg.opt, "m": m, "d": d, "value_bytes": vb}
    dense = dense_memory_bytes(m, d, 4)
    if cfg.opt in ("smfac", "sggt"):
        lcg = cfg.opt == "smfac"
        k = int(block_quotas(d, cfg.block, cfg.density).sum())
        actual = sparse_memory_bytes(m, d, k, vb, lcg)
        report.update(row_entries=k, dense_baseline_bytes=dense, bytes=actual, ratio=dense / actual)
        report["per_coordinate"] = {
            str(w): per_coordinate_footprint(m, cfg.density, w, lcg) for w in (4, 2)
        }
    elif cfg.opt in ("dmfac", "dggt"):
        actual = dense_memory_bytes(m, d, vb)
        report.update(dense_baseline_bytes=dense, bytes=actual, ratio=dense / actual)
    elif cfg.opt == "lrmfac":
        factors = 0
        for s in task.layer_shapes:
            p1 = s[0]
            rest = int(np.prod(s[1:])) if len(s) > 1 else 1
            factors += (p1 + rest) * max(1, min(cfg.rank, p1, rest))
        actual = 8 * m * factors + 8 * d + 8 * m * m
        report.update(dense_baseline_bytes=dense, bytes=actual, ratio=dense / actual)
    else:
        slots = 1 if cfg.opt == "sgd" else 2
        report.update(bytes=8 * slots * d)
    return report


def per_coordinate_footprint(m, density, value_bytes, lcg_buffer=True):
    """Bytes per model coordinate for large ``d`` with ``k = density * d``.

    ``ratio_rounded`` divides by the sparse footprint rounded up to whole
    bytes per coordinate, the way such ratios are usually quoted
    (e.g. 89.92 -> 90).
    """
    dense = 4.0 * m
    sparse = density * m * (4 + value_bytes) + (8 if lcg_buffer else 4)
    return {
        "dense": dense,
        "sparse": round(sparse, 10),
        "sparse_extra_per_m": 4,
        "ratio_asymptotic": dense / sparse,
        "ratio_rounded": dense / math.ceil(round(sparse, 10)),
    }


@dataclass
class RunResult:
    config: RunConfig
    records: list
    theta: np.ndarray
    final_loss: float
    memory: dict = field(default_factory=dict)


def run(config, task=None, on_record=None):
    """Execute ``config.steps`` optimizer steps and collect per-step records."""
    cfg = config.resolved()
    task = task if task is not None else build_task(cfg)
    opt = build_optimizer(cfg, task)
    theta = task.init_theta()
    records = []
    with np.errstate(over="ignore", invalid="ignore"):
        theta = _loop(cfg, task, opt, theta, records, on_record)
    return RunResult(cfg, records, theta, task.loss(theta), memory_report(cfg, task))


def _loop(cfg, task, opt, theta, records, on_record):
    for t in range(cfg.steps):
        t0 = time.perf_counter()
        loss = task.loss(theta, t)
        g = task.grad(theta, t)
        lr = learning_rate(cfg, t)
        try:
            new_theta, u = efcp_step(opt, theta, g, lr, cfg.wd, cfg.clip)
        except NumericalBreakdown as exc:
            rec = StepRecord(t, loss, float(np.linalg.norm(g)), float("nan"), float("nan"), 0.0)
            raise DivergenceError(f"step {t}: {exc}", rec) from exc
        ms = (time.perf_counter() - t0) * 1e3 if cfg.timing else 0.0
        rec = StepRecord(
            t,
            loss,
            float(np.linalg.norm(g)),
            float(np.linalg.norm(new_theta - theta)),
            float(opt.ef_norm()),
            ms,
        )
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(new_theta)) and math.isfinite(loss)):
            raise DivergenceError(f"step {t}: non-finite update", rec)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        theta = new_theta
    return theta
