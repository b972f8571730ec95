import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efcp.compressors import topk_block
from efcp.errors import ConfigError
from efcp.ggt import DEFAULT_WINDOW, GGT, ggt_precondition, ggt_update
from efcp.oracles import ggt_spectral_apply, relative_error
from efcp.window import DenseGradWindow, SparseGradWindow


def dense_state(m, d, eps):
    return GGT(DenseGradWindow(m, d, "f64"), eps)


def test_default_window_is_100():
    assert DEFAULT_WINDOW == 100


def test_empty_window():
    x = np.array([1.0, -2.0])
    np.testing.assert_allclose(dense_state(3, 2, 1e-3).precondition(x), x / 1e-3)


def test_first_insert():
    g = np.array([3.0, 4.0])
    s = dense_state(3, 2, 1e-3)
    ggt_update(s, g)
    assert s.S[0, 0] == 25.0
    assert s.eig.values[0] == 25.0


def test_orthogonal_unit_gradients_give_identity_gram():
    s = dense_state(4, 6, 1e-3)
    for i in range(4):
        s.update(np.eye(6)[i])
    np.testing.assert_array_equal(s.S, np.eye(4))
    np.testing.assert_allclose(s.eig.values, 1.0)


def test_single_gradient_query_on_itself():
    g = np.array([1.0, 2.0, 2.0])
    s = dense_state(5, 3, 1e-2)
    s.update(g)
    np.testing.assert_allclose(ggt_precondition(s, g), g / (1e-2 + 3.0), rtol=1e-12)


def test_random_25x8_matches_spectral_oracle():
    rng = np.random.default_rng(0)
    grads, x = rng.standard_normal((8, 25)), rng.standard_normal(25)
    for eps in (1e-5, 1e-3):
        s = dense_state(8, 25, eps)
        for g in grads:
            s.update(g)
        assert relative_error(s.precondition(x), ggt_spectral_apply(grads, eps, x)) <= 1e-7


def test_replay_gram_after_wraparound():
    rng = np.random.default_rng(1)
    grads = rng.standard_normal((7, 10))
    s = dense_state(3, 10, 1e-3)
    for g in grads:
        s.update(g)
    order = s.window.age_order
    np.testing.assert_allclose(s.S[np.ix_(order, order)], grads[-3:] @ grads[-3:].T, rtol=1e-13)


def test_zero_gradients_are_inert():
    s = dense_state(3, 4, 1e-2)
    for _ in range(4):
        s.update(np.zeros(4))
    x = np.arange(4.0)
    np.testing.assert_allclose(s.precondition(x), x / 1e-2)


def test_bad_eps():
    with pytest.raises(ConfigError):
        dense_state(2, 2, 0.0)


def test_sparse_dense_agreement():
    rng = np.random.default_rng(2)
    sp = GGT(SparseGradWindow(5, 30, 0.2, 10, "f64"), 1e-3)
    de = dense_state(5, 30, 1e-3)
    for _ in range(7):
        c = topk_block(rng.standard_normal(30), 0.2, 10)
        sp.update(c)
        de.update(c)
    x = rng.standard_normal(30)
    np.testing.assert_allclose(sp.precondition(x), de.precondition(x), rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 20), st.floats(0.1, 10.0), st.integers(0, 2**32 - 1))
def test_spd_and_scaling_against_oracle(m, d, alpha, seed):
    rng = np.random.default_rng(seed)
    grads = alpha * rng.standard_normal((int(rng.integers(1, m + 1)), d))
    s = dense_state(m, d, 1e-3)
    for g in grads:
        s.update(g)
    x = rng.standard_normal(d)
    u = s.precondition(x)
    assert x @ u > 0
    assert relative_error(u, ggt_spectral_apply(grads, 1e-3, x)) <= 1e-7
