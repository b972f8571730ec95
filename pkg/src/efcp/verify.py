"""Oracle-equivalence suites used by ``efcp verify`` and the test suite.

Each check builds randomized instances, runs the production code path and
an independent dense reference from :mod:`efcp.oracles`, and reports the
worst relative deviation. A SHA-256 digest of every production output is
kept so runs with different worker counts can be compared bit for bit.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import oracles
from .compressors import (
    DEFAULT_BLOCK_SIZE,
    ErrorFeedback,
    LowRankCompressed,
    TopKCompressor,
    block_quotas,
    densify,
    power_compress,
    resolve_dtype,
    topk_block,
)
from .ggt import GGT
from .lowrank import lr_inner_product
from .mfac import MFAC
from .window import DenseGradWindow, SparseGradWindow


@dataclass
class CheckResult:
    name: str
    instances: int
    worst: float
    tol: float
    seconds: float = 0.0
    digest: str = ""
    note: str = ""

    @property
    def passed(self):
        return bool(np.isfinite(self.worst) and self.worst <= self.tol)


@dataclass
class _Tracker:
    worst: float = 0.0
    count: int = 0
    h: "hashlib._Hash" = field(default_factory=hashlib.sha256)

    def add(self, err, *outputs):
        err = float(err)
        self.worst = err if not np.isfinite(err) else max(self.worst, err)
        self.count += 1
        for o in outputs:
            self.h.update(np.ascontiguousarray(o).tobytes())

    def result(self, name, tol, t0, note=""):
        return CheckResult(name, self.count, self.worst, tol, time.perf_counter() - t0, self.h.hexdigest(), note)


def _fill_sparse(rng, window, n_rows, scale=1.0):
    rows = []
    for _ in range(n_rows):
        g = scale * rng.standard_normal(window.d)
        c = topk_block(g, window.density, window.block_size)
        window.set_row(c)
        rows.append(c)
    return rows


def check_kernels(
    rng,
    n=50,
    ms=(4, 16, 64),
    ds=(100, 10_000),
    densities=(0.005, 0.01, 0.1),
    precision="f64",
    threads=1,
    block_sizes=(128, DEFAULT_BLOCK_SIZE),
):
    """SP and LCG against sequential dense matvec / transposed matvec.

    At f64 the reference reads the stored values and sums in the same order,
    so the tolerance is zero. At f32 the reference uses the unrounded f64
    gradients and the tolerance is 1e-5 relative.
    """
    t0 = time.perf_counter()
    exact = resolve_dtype(precision) == np.float64
    sp_t, lcg_t = _Tracker(), _Tracker()
    for _ in range(n):
        m = int(rng.choice(ms))
        d = int(rng.choice(ds))
        density = float(rng.choice(densities))
        block = int(rng.choice(block_sizes))
        w = SparseGradWindow(m, d, density, block, precision, threads)
        rows = _fill_sparse(rng, w, int(rng.integers(1, 2 * m + 1)))
        order = w.age_order
        if exact:
            G = w.to_dense()
        else:
            G = np.zeros((m, d))
            for r, c in zip(order, rows[-len(order):]):
                G[r] = densify(c, np.float64)
        x = rng.standard_normal(d)
        coeffs = rng.standard_normal(m)
        occupied = w.occupied_mask()
        got_sp = w.sp(x)
        ref_sp = np.where(occupied, oracles.sequential_matvec(G, x), 0.0)
        got_lcg = w.lcg(coeffs)
        ref_lcg = oracles.sequential_rmatvec(G, coeffs, order)
        if exact:
            sp_err = float(np.max(np.abs(got_sp - ref_sp), initial=0.0))
            lcg_err = float(np.max(np.abs(got_lcg - ref_lcg), initial=0.0))
        else:
            sp_err = oracles.relative_error(got_sp, ref_sp)
            lcg_err = oracles.relative_error(got_lcg, ref_lcg)
        sp_t.add(sp_err, got_sp)
        lcg_t.add(lcg_err, got_lcg)
    tol = 0.0 if exact else 1e-5
    label = "exact" if exact else "rel"
    return [
        sp_t.result(f"sp vs dense matvec ({precision}, {label})", tol, t0),
        lcg_t.result(f"lcg vs dense rmatvec ({precision}, {label})", tol, t0),
    ]


def _mfac_instance(rng, d_max, m_max, lams, threads):
    d = int(rng.integers(2, d_max + 1))
    m = int(rng.integers(1, m_max + 1))
    lam = float(rng.choice(lams))
    n_ins = int(rng.integers(1, 2 * m + 1))
    grads = rng.standard_normal((n_ins, d))
    x = rng.standard_normal(d)
    sparse = bool(rng.integers(0, 2))
    return d, m, lam, grads, x, sparse


def _mfac_state(m, d, lam, sparse, threads):
    if sparse:
        return MFAC(SparseGradWindow(m, d, 1.0, DEFAULT_BLOCK_SIZE, "f64", threads), lam)
    return MFAC(DenseGradWindow(m, d, "f64", threads), lam)


def _insert(state, grads, sparse):
    for g in grads:
        state.update(topk_block(g, 1.0) if sparse else g)


def check_mfac(rng, n=20, d_max=50, m_max=16, lams=(1e-6, 1e-4, 1e-2), threads=1, tol=1e-8):
    """M-FAC products against a dense solve, plus insertion-order invariance."""
    t0 = time.perf_counter()
    ihvp, perm = _Tracker(), _Tracker()
    for _ in range(n):
        d, m, lam, grads, x, sparse = _mfac_instance(rng, d_max, m_max, lams, threads)
        state = _mfac_state(m, d, lam, sparse, threads)
        _insert(state, grads, sparse)
        kept = grads[-m:]
        got = state.precondition(x)
        ref = oracles.fisher_inverse_apply(kept, lam, m, x)
        ihvp.add(oracles.relative_error(got, ref), got)

        shuffled = _mfac_state(m, d, lam, sparse, threads)
        _insert(shuffled, kept[rng.permutation(len(kept))], sparse)
        got_p = shuffled.precondition(x)
        perm.add(oracles.relative_error(got_p, got), got_p)
    return [
        ihvp.result("mfac ihvp vs explicit inverse", tol, t0),
        perm.result("mfac insertion-order invariance", tol, t0),
    ]


def check_ggt(rng, n=20, d_max=30, m_max=10, epss=(1e-5, 1e-3), threads=1, tol=1e-7):
    """GGT m x m reformulation against the d x d spectral formula."""
    t0 = time.perf_counter()
    tr = _Tracker()
    for _ in range(n):
        d = int(rng.integers(2, d_max + 1))
        m = int(rng.integers(1, m_max + 1))
        eps = float(rng.choice(epss))
        n_ins = int(rng.integers(1, 2 * m + 1))
        grads = rng.standard_normal((n_ins, d))
        sparse = bool(rng.integers(0, 2))
        if sparse:
            state = GGT(SparseGradWindow(m, d, 1.0, DEFAULT_BLOCK_SIZE, "f64", threads), eps)
        else:
            state = GGT(DenseGradWindow(m, d, "f64", threads), eps)
        for g in grads:
            state.update(topk_block(g, 1.0) if sparse else g)
        x = rng.standard_normal(d)
        got = state.precondition(x)
        ref = oracles.ggt_spectral_apply(grads[-m:], eps, x)
        tr.add(oracles.relative_error(got, ref), got)
    return [tr.result("ggt vs d x d spectral oracle", tol, t0)]


def _random_factors(rng, p1, p2, rank):
    return LowRankCompressed(rng.standard_normal((p1, rank)), rng.standard_normal((p2, rank)), (p1, p2))


def check_lowrank(rng, n_pairs=100, n_power=20, threads=1):
    """Factored inner product and exact-rank power-iteration reconstruction."""
    t0 = time.perf_counter()
    ip = _Tracker()
    for _ in range(n_pairs):
        p1, p2 = (int(v) for v in rng.integers(1, 40, size=2))
        a = _random_factors(rng, p1, p2, int(rng.integers(1, 6)))
        b = _random_factors(rng, p1, p2, int(rng.integers(1, 6)))
        got = lr_inner_product(a, b)
        ref = oracles.frobenius(a.densify(), b.densify())
        ip.add(abs(got - ref) / max(abs(ref), 1e-300), np.array([got]))
    first = ip.result("low-rank inner product vs Frobenius", 1e-10, t0)

    t1 = time.perf_counter()
    pw = _Tracker()
    for _ in range(n_power):
        p1, p2 = (int(v) for v in rng.integers(2, 40, size=2))
        rank = int(rng.integers(1, min(p1, p2) + 1))
        g = rng.standard_normal((p1, rank)) @ rng.standard_normal((rank, p2))
        c = power_compress(g, rng.standard_normal((p2, rank)))
        rec = c.densify()
        pw.add(oracles.relative_error(rec, g), rec)
    return [first, pw.result("power compress exact-rank reconstruction", 1e-9, t1)]


def check_error_feedback(rng, steps=1000, d=257, density=0.05, block_size=64, precision="f32", threads=1):
    """``xi_t + densify(c_t) == xi_{t-1} + g_t`` bit for bit, quotas every step."""
    t0 = time.perf_counter()
    dtype = resolve_dtype(precision)
    ef = ErrorFeedback(d, dtype)
    comp = TopKCompressor(density, block_size)
    quotas = block_quotas(d, block_size, density)
    tr = _Tracker()
    for _ in range(steps):
        g = (rng.standard_normal(d) * rng.exponential(1.0, d)).astype(dtype)
        before = ef.xi + g
        c = ef.step(g, comp)
        after = ef.xi + densify(c, dtype)
        mismatches = int(np.count_nonzero(before.view(np.uint8) != after.view(np.uint8)))
        counts = np.bincount(c.indices // block_size, minlength=quotas.size)
        bad_quota = int(np.count_nonzero(counts != quotas))
        tr.add(mismatches + bad_quota, ef.xi)
    return [tr.result(f"error-feedback conservation ({precision}, bitwise)", 0.0, t0)]


def run_suites(sizes="default", seed=0, threads=1):
    """All suites at the given size preset; returns a list of ``CheckResult``."""
    rng = np.random.default_rng(seed)
    if sizes == "large":
        kernel = dict(n=50, ms=(4, 16, 64), ds=(100, 10_000), densities=(0.005, 0.01, 0.1))
    elif sizes == "default":
        kernel = dict(n=30, ms=(4, 16), ds=(20, 50), densities=(0.05, 0.1, 0.5), block_sizes=(16, 4096))
    else:
        raise ValueError(f"unknown size preset {sizes!r}")
    results = []
    for precision in ("f64", "f32"):
        results += check_kernels(rng, precision=precision, threads=threads, **kernel)
    results += check_mfac(rng, threads=threads)
    results += check_ggt(rng, threads=threads)
    results += check_lowrank(rng, threads=threads)
    results += check_error_feedback(rng, threads=threads)
    return results


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'n':>4}  {'worst':>10}  {'tol':>8}  {'time':>7}  result"]
    for r in results:
        lines.append(
            f"{r.name:<{width}}  {r.instances:>4}  {r.worst:>10.3g}  {r.tol:>8.1g}  "
            f"{r.seconds:>6.2f}s  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
