"""The numba kernels and their numpy references must agree."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3bind import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")


def _bags(rng, n, vocab, max_len=6):
    lengths = rng.integers(1, max_len + 1, size=n)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    ids = rng.integers(0, vocab, size=offsets[-1]).astype(np.int64)
    return ids, offsets


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 20))
def test_embedding_bag_parity(seed, n, vocab):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(vocab, 5))
    ids, offsets = _bags(rng, n, vocab)
    a = K._np_embedding_bag_mean(table, ids, offsets)
    b = K._nb_embedding_bag_mean(table, ids, offsets)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-15)
    g = rng.normal(size=(n, 5))
    ga = K._np_embedding_bag_mean_grad(g, ids, offsets, vocab)
    gb = K._nb_embedding_bag_mean_grad(g, ids, offsets, vocab)
    assert np.allclose(ga, gb, rtol=1e-13, atol=1e-15)


def test_adamw_parity():
    # replay identical gradient streams through both updates
    grads = [np.random.default_rng(t).normal(size=(7, 3)) for t in range(5)]
    out = []
    for fn in (K._np_adamw_update, K._nb_adamw_update):
        p = np.random.default_rng(0).normal(size=(7, 3))
        m, v = np.zeros_like(p), np.zeros_like(p)
        for t, g in enumerate(grads, start=1):
            fn(p, g, m, v, 1e-2, 0.9, 0.999, 1e-8, 0.01, 1 - 0.9 ** t, 1 - 0.999 ** t)
        out.append((p, m, v))
    for a, b in zip(*out):
        assert np.allclose(a, b, rtol=1e-13, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.integers(1, 12))
def test_first_relevant_rank_parity(seed, q, g):
    rng = np.random.default_rng(seed)
    # coarse values force ties, exercising the lower-index rule
    sims = rng.integers(-2, 3, size=(q, g)).astype(np.float64)
    rel = rng.random((q, g)) < 0.3
    rel[np.arange(q), rng.integers(0, g, size=q)] = True
    a = K._np_first_relevant_rank(sims, rel)
    b = K._nb_first_relevant_rank(sims, rel)
    assert np.array_equal(a, b)


def test_first_relevant_rank_ties_go_to_lower_index():
    sims = np.array([[0.5, 0.5, 0.5]])
    for fn in (K._np_first_relevant_rank, K._nb_first_relevant_rank):
        assert fn(sims, np.array([[False, False, True]])).tolist() == [2]
        assert fn(sims, np.array([[True, False, False]])).tolist() == [0]


def test_backend_flag_matches_module_state():
    assert K.BACKEND == ("numba" if K.USE_NUMBA else "numpy")
