import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from finch_kv.tensor_core import (
    ParameterError,
    Rng,
    ShapeError,
    as_matrix,
    gaussian_fill,
    matmul,
    softmax_rows,
    top_r_indices,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    rows, inner, cols = len(a), len(b), len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            s = 0.0
            for t in range(inner):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def test_matmul_identity():
    assert matmul([[1, 0], [0, 1]], [[5, 6], [7, 8]]).tolist() == [[5, 6], [7, 8]]


def test_matmul_row_by_column():
    assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a.tolist(), b.tolist()), atol=1e-12, rtol=0)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matmul_associative(seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(3, 4)), r.normal(size=(4, 5)), r.normal(size=(5, 2))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-9)


def test_as_matrix_rejects_nonfinite():
    with pytest.raises(ParameterError):
        as_matrix([[1.0, float("nan")]])
    assert as_matrix([1, 2, 3, 4, 5, 6], 2, 3).shape == (2, 3)


def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], atol=1e-15)


def test_softmax_single_visible_entry():
    out = softmax_rows([[7.5, -np.inf, -np.inf]])
    assert out.tolist() == [[1.0, 0.0, 0.0]]


def test_softmax_known_values():
    e = [math.exp(x) for x in (1, 2, 3)]
    expect = [x / sum(e) for x in e]
    np.testing.assert_allclose(expect, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
    np.testing.assert_allclose(softmax_rows([[1.0, 2.0, 3.0]])[0], expect, atol=1e-15)


def test_softmax_causal_mask_exact_zeros(rng):
    out = softmax_rows(rng.normal(size=(4, 6)), causal=True, offset=2)
    for i in range(4):
        assert np.all(out[i, i + 3:] == 0.0)
        assert abs(out[i, :i + 3].sum() - 1) < 1e-12


def test_softmax_fully_masked_row_is_zero_not_nan():
    with pytest.warns(RuntimeWarning):
        out = softmax_rows([[-np.inf, -np.inf], [0.0, 1.0]])
    assert out[0].tolist() == [0.0, 0.0]
    assert not np.isnan(out).any()


def test_softmax_handles_huge_logits():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = softmax_rows([[1e300, 0.0], [-1e300, 0.0]])
    assert out[0].tolist() == [1.0, 0.0] and out[1].tolist() == [0.0, 1.0]


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite))
def test_softmax_rows_sum_to_one(a):
    np.testing.assert_allclose(softmax_rows(a).sum(axis=-1), 1.0, atol=1e-9)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite), finite)
def test_softmax_shift_invariant(a, shift):
    np.testing.assert_allclose(softmax_rows(a + shift), softmax_rows(a), atol=1e-9)


def test_top_r_basic():
    assert top_r_indices([0.1, 0.9, 0.5], 2).tolist() == [1, 2]


def test_top_r_ties_prefer_smaller_index():
    assert top_r_indices([0.4, 0.4, 0.4], 2).tolist() == [0, 1]


def test_top_r_matches_full_sort(rng):
    v = rng.normal(size=100)
    expect = sorted(range(100), key=lambda i: (-v[i], i))[:17]
    assert top_r_indices(v, 17).tolist() == expect


def test_top_r_too_many():
    with pytest.raises(ParameterError):
        top_r_indices([1.0, 2.0], 3)


@given(
    arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3)),
    st.floats(1e-3, 1e3),
    st.data(),
)
def test_top_r_scale_invariant(v, scale, data):
    r = data.draw(st.integers(0, v.size))
    # positive scaling is monotone but can merge two floats into a tie; skip those
    scaled = v * scale
    if np.unique(scaled).size != np.unique(v).size:
        return
    assert top_r_indices(v, r).tolist() == top_r_indices(scaled, r).tolist()


def test_gaussian_fill_deterministic():
    a = gaussian_fill(Rng(0), 2, 2, 1.0)
    b = gaussian_fill(Rng(0), 2, 2, 1.0)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, gaussian_fill(Rng(1), 2, 2, 1.0))
    assert not gaussian_fill(Rng(0), 2, 2, 0.0).any()


def test_rng_spawn_is_stable():
    assert np.array_equal(Rng(5).spawn(2).normal(3), Rng(5).spawn(2).normal(3))
    assert not np.array_equal(Rng(5).spawn(2).normal(3), Rng(5).spawn(3).normal(3))
