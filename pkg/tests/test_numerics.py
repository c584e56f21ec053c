import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vqlattice.numerics import (
    ContractError,
    DenseMap,
    SeededRng,
    activations,
    dense_apply,
    gumbel_softmax,
    linear_anneal,
    log_softmax,
    log_sum_exp,
    sigmoid,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False)


def test_dense_identity_and_zero_maps():
    assert np.allclose(dense_apply(DenseMap(np.eye(2), np.zeros(2)), [3, -1]), [3, -1])
    assert np.allclose(dense_apply(DenseMap(np.zeros((2, 5)), [1, 2]), np.ones(5)), [1, 2])


def test_dense_matches_loop_oracle(np_rng):
    W, b, x = np_rng.normal(size=(4, 3)), np_rng.normal(size=4), np_rng.normal(size=3)
    expected = [sum(W[i, j] * x[j] for j in range(3)) + b[i] for i in range(4)]
    assert np.allclose(dense_apply(DenseMap(W, b), x), expected, atol=1e-12)


def test_dense_dimension_mismatch():
    with pytest.raises(ContractError):
        dense_apply(DenseMap(np.eye(2), np.zeros(2)), [1, 2, 3])
    with pytest.raises(ContractError):
        DenseMap(np.eye(2), np.zeros(3))


def test_log_sum_exp_examples():
    assert log_sum_exp([math.log(0.5), math.log(0.5)]) == pytest.approx(0.0, abs=1e-15)
    assert log_sum_exp([-3.25]) == -3.25
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(0.693147, abs=1e-6)
    assert log_sum_exp([-math.inf, -math.inf]) == -math.inf
    with pytest.raises(ContractError):
        log_sum_exp([])


@given(st.lists(finite, min_size=1, max_size=20), finite)
def test_log_sum_exp_shift_invariance(xs, c):
    assert log_sum_exp([x + c for x in xs]) == pytest.approx(log_sum_exp(xs) + c, abs=1e-9)
    assert log_sum_exp(xs) >= max(xs)


@given(st.lists(finite, min_size=1, max_size=20))
def test_log_softmax_normalizes(xs):
    assert np.exp(log_softmax(np.array(xs))).sum() == pytest.approx(1.0, abs=1e-9)


def test_activations(np_rng):
    assert sigmoid(0.0) == 0.5
    assert np.allclose(softmax(np.zeros(2)), [0.5, 0.5])
    x = np_rng.normal(size=7)
    assert np.allclose(log_softmax(x), x - log_sum_exp(x), atol=1e-12)
    assert softmax(x).sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(activations("tanh", x), np.tanh(x))
    assert np.allclose(activations("sigmoid", x), 1 / (1 + np.exp(-x)), atol=1e-15)


def test_gumbel_softmax_inference_mode():
    probs, idx = gumbel_softmax(np.array([5.0, 0.0, 0.0]), 1.0)
    assert idx == 0
    probs, idx = gumbel_softmax(np.array([1.0, 0.0]), 0.01)
    assert np.allclose(probs, [1.0, 0.0], atol=1e-6)
    again, _ = gumbel_softmax(np.array([1.0, 0.0]), 0.01)
    assert np.array_equal(probs, again)


def test_gumbel_softmax_hard_is_one_hot():
    probs, idx = gumbel_softmax(np.array([0.1, 2.0, -1.0]), 1.0, hard=True, rng=SeededRng(3))
    assert probs.sum() == 1.0 and probs[idx] == 1.0


def test_gumbel_softmax_bad_temperature():
    with pytest.raises(ContractError):
        gumbel_softmax(np.zeros(3), 0.0)


def test_gumbel_draws_uniform_for_equal_logits():
    rng = SeededRng(11)
    K = 4
    counts = np.zeros(K)
    for _ in range(10_000):
        counts[gumbel_softmax(np.zeros(K), 1.0, rng=rng)[1]] += 1
    assert np.all(np.abs(counts / 10_000 - 1 / K) < 0.05)


def test_seeded_rng_determinism():
    a, b = SeededRng(42), SeededRng(42)
    assert np.array_equal(a.normal(0, 1, 10), b.normal(0, 1, 10))
    assert not np.array_equal(SeededRng(42).derive("x").normal(0, 1, 5), SeededRng(42).derive("y").normal(0, 1, 5))
    assert np.array_equal(SeededRng(7).derive("t").uniform(size=3), SeededRng(7).derive("t").uniform(size=3))


def test_seeded_rng_stream_is_pinned():
    # frozen first draws guard against silent generator changes across numpy versions
    assert SeededRng(0).integers(0, 1_000_000, size=3).tolist() == FROZEN_INTEGERS


FROZEN_INTEGERS = [34741, 11546, 611950]


def test_linear_anneal():
    assert linear_anneal(2.0, 0.5, 0.0) == 2.0
    assert linear_anneal(2.0, 0.5, 1.0) == 0.5
    assert linear_anneal(2.0, 0.5, 0.5) == pytest.approx(1.25)
