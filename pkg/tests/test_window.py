import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efcp.compressors import SparseCompressed, topk_block
from efcp.errors import ShapeError
from efcp.oracles import sequential_matvec, sequential_rmatvec
from efcp.window import (
    DenseGradWindow,
    SparseGradWindow,
    dense_memory_bytes,
    sparse_memory_bytes,
)


def row(d, idx, vals, block=4096):
    return SparseCompressed(np.array(idx), np.array(vals, dtype=float), d, block)


def filled_window(seed=0, m=8, d=300, density=0.05, block=64, inserts=13, dtype="f64", threads=1):
    rng = np.random.default_rng(seed)
    w = SparseGradWindow(m, d, density, block, dtype, threads)
    history = []
    for _ in range(inserts):
        c = topk_block(rng.standard_normal(d), density, block)
        w.set_row(c)
        history.append(c)
    return w, history


def one_per_row_window():
    # block size d with density 1/d: exactly one entry per row
    return SparseGradWindow(2, 4, 0.25, block_size=4, dtype="f64")


def test_first_insert():
    w = one_per_row_window()
    row_idx, evicted = w.set_row(row(4, [2], [7.0], 4))
    assert (row_idx, evicted, w.filled) == (0, None, 1)
    np.testing.assert_array_equal(w.row_dense(0), [0, 0, 7, 0])


def test_wraparound():
    w = one_per_row_window()
    for i in range(3):
        w.set_row(row(4, [i], [float(i + 1)], 4))
    np.testing.assert_array_equal(w.row_dense(0), [0, 0, 3, 0])
    assert w.age_order.tolist() == [1, 0]
    assert w.filled == 2


def test_replay_keeps_last_m_in_age_order():
    w, history = filled_window(m=4, inserts=100)
    for r, c in zip(w.age_order, history[-4:]):
        np.testing.assert_array_equal(w.row_dense(r), c.densify(np.float64))


def test_set_row_rejects_wrong_structure():
    w = SparseGradWindow(3, 10, 0.2, block_size=5, dtype="f64")
    with pytest.raises(ShapeError):
        w.set_row(row(10, [0, 1, 2, 3], [1.0] * 4, 5))  # 4 entries in block 0
    with pytest.raises(ShapeError):
        w.set_row(row(11, [0, 5], [1.0, 1.0], 5))
    with pytest.raises(ShapeError):
        w.set_row(np.zeros(10))


def test_sp_small_example():
    w = one_per_row_window()
    w.set_row(row(4, [0], [1.0], 4))
    w.set_row(row(4, [3], [2.0], 4))
    np.testing.assert_array_equal(w.sp(np.array([1.0, 2.0, 3.0, 4.0])), [1.0, 8.0])
    np.testing.assert_array_equal(w.sp(np.zeros(4)), [0.0, 0.0])


def test_sp_unoccupied_rows_are_zero():
    w, _ = filled_window(m=8, inserts=3)
    out = w.sp(np.ones(w.d))
    np.testing.assert_array_equal(out[3:], 0.0)


def test_sp_dimension_mismatch():
    w, _ = filled_window()
    with pytest.raises(ShapeError):
        w.sp(np.ones(w.d + 1))
    with pytest.raises(ShapeError):
        w.lcg(np.ones(w.m + 1))


def test_lcg_unit_and_zero():
    w, _ = filled_window(inserts=5)
    for j in range(5):
        e = np.zeros(w.m)
        e[j] = 1.0
        np.testing.assert_array_equal(w.lcg(e), w.row_dense(j))
    np.testing.assert_array_equal(w.lcg(np.zeros(w.m)), 0.0)


def test_lcg_ignores_unoccupied_coefficients():
    w, _ = filled_window(m=8, inserts=3)
    c = np.ones(w.m)
    c2 = c.copy()
    c2[3:] = 1e9
    np.testing.assert_array_equal(w.lcg(c), w.lcg(c2))


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_kernels_vs_dense_large(dtype):
    w, _ = filled_window(m=64, d=10_000, density=0.01, block=4096, inserts=70, dtype=dtype)
    G = w.to_dense()
    rng = np.random.default_rng(1)
    x, c = rng.standard_normal(w.d), rng.standard_normal(w.m)
    ref_sp = sequential_matvec(G, x)
    ref_lcg = sequential_rmatvec(G, c, w.age_order)
    if dtype == "f64":
        np.testing.assert_array_equal(w.sp(x), ref_sp)
        np.testing.assert_array_equal(w.lcg(c), ref_lcg)
    else:
        np.testing.assert_allclose(w.sp(x), G @ x, rtol=1e-5, atol=1e-12)
        np.testing.assert_allclose(w.lcg(c), G.T @ c, rtol=1e-5, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 120), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_adjointness(m, d, block, seed):
    rng = np.random.default_rng(seed)
    w = SparseGradWindow(m, d, 0.3, block, "f64")
    for _ in range(int(rng.integers(0, 2 * m + 1))):
        w.set_row(topk_block(rng.standard_normal(d), 0.3, block))
    x, c = rng.standard_normal(d), rng.standard_normal(m)
    lhs, rhs = w.sp(x) @ c, x @ w.lcg(c)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("threads", [2, 3, 4, 8])
def test_thread_count_never_changes_bits(threads):
    w1, _ = filled_window(seed=2, m=16, d=5000, density=0.02, block=256, inserts=20, dtype="f32")
    wn, _ = filled_window(seed=2, m=16, d=5000, density=0.02, block=256, inserts=20, dtype="f32", threads=threads)
    rng = np.random.default_rng(3)
    x, c = rng.standard_normal(5000), rng.standard_normal(16)
    assert w1.sp(x).tobytes() == wn.sp(x).tobytes()
    assert w1.lcg(c).tobytes() == wn.lcg(c).tobytes()


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_dump_load_roundtrip(tmp_path, dtype):
    w, _ = filled_window(m=5, inserts=7, dtype=dtype)
    path = tmp_path / "window.bin"
    w.dump(path)
    raw = path.read_bytes()
    assert raw[:7] == b"EFCPGW1"
    back = SparseGradWindow.load(path)
    assert (back.m, back.d, back.k, back.block_size) == (w.m, w.d, w.k, w.block_size)
    assert (back.next_row, back.filled) == (w.next_row, w.filled)
    np.testing.assert_array_equal(back.I, w.I)
    np.testing.assert_array_equal(back.V, w.V)
    assert back.V.dtype == w.V.dtype


def test_load_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTAWINDOW" + bytes(100))
    with pytest.raises(ShapeError):
        SparseGradWindow.load(bad)
    short = tmp_path / "short.bin"
    short.write_bytes(b"EFC")
    with pytest.raises(ShapeError):
        SparseGradWindow.load(short)


def test_memory_bytes_formula():
    w = SparseGradWindow(16, 1000, 0.01, block_size=100)
    k = w.k
    assert k == 10
    assert w.memory_bytes() == 4 * 16 * k + 4 * 16 * k + 4 * 1000 + 4 * 16 + 4 * 1000
    assert w.memory_bytes(value_bytes=2) == 4 * 16 * k + 2 * 16 * k + 8 * 1000 + 4 * 16
    assert w.memory_bytes(lcg_buffer=False) == 8 * 16 * k + 4 * 1000 + 4 * 16


def test_memory_ratios_large_d():
    d = 100 * 4096 * 10
    k = d // 100
    dense = dense_memory_bytes(1024, d)
    assert abs(sparse_memory_bytes(1024, d, k) - 89.92 * d) <= 4 * 1024
    assert round(dense / (90 * d), 1) == 45.5
    assert round(dense_memory_bytes(100, d) / (12 * d), 1) == 33.3
    assert sparse_memory_bytes(100, d, k, 4, lcg_buffer=False) == 12 * d + 400


def test_dense_window_matches_sparse_at_full_density():
    rng = np.random.default_rng(4)
    s = SparseGradWindow(3, 20, 1.0, 8, "f64")
    dw = DenseGradWindow(3, 20, "f64")
    for _ in range(5):
        g = rng.standard_normal(20)
        s.set_row(topk_block(g, 1.0, 8))
        dw.set_row(g)
    x, c = rng.standard_normal(20), rng.standard_normal(3)
    np.testing.assert_allclose(s.sp(x), dw.sp(x), rtol=1e-13)
    np.testing.assert_allclose(s.lcg(c), dw.lcg(c), rtol=1e-13)
    assert s.age_order.tolist() == dw.age_order.tolist()
