import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsalign.tensor_core import (
    FeatureVolume,
    NonFiniteError,
    as_tensor,
    flatten_tokens,
    l2_normalize_channels,
    matmul_transpose,
    token_index,
    unflatten_tokens,
)


def test_fiber_3_4_normalizes_to_3_4_5_triangle():
    v = l2_normalize_channels(FeatureVolume(np.array([3.0, 4.0]).reshape(1, 1, 1, 2)))
    np.testing.assert_allclose(v.data.reshape(-1), [0.6, 0.8], atol=1e-15)
    assert v.degenerate == 0 and v.normalized


def test_zero_fiber_stays_zero_and_is_counted():
    data = np.array([[0.0, 0.0], [1.0, 1.0]]).reshape(1, 1, 2, 2)
    v = l2_normalize_channels(FeatureVolume(data))
    np.testing.assert_array_equal(v.data[0, 0, 0], [0.0, 0.0])
    assert v.degenerate == 1


def test_random_volume_has_unit_fibers(rng):
    v = l2_normalize_channels(FeatureVolume(rng.standard_normal((2, 2, 2, 3))))
    for f in range(2):
        for h in range(2):
            for w in range(2):
                norm = sum(float(x) ** 2 for x in v.data[f, h, w]) ** 0.5
                assert abs(norm - 1.0) < 1e-9


def test_normalize_is_idempotent(rng):
    v = l2_normalize_channels(FeatureVolume(rng.standard_normal((3, 2, 4, 5))))
    np.testing.assert_allclose(l2_normalize_channels(v).data, v.data, atol=1e-12)


def test_non_finite_input_is_rejected():
    with pytest.raises(NonFiniteError):
        FeatureVolume(np.array([np.nan, 1.0]).reshape(1, 1, 1, 2))
    with pytest.raises(NonFiniteError):
        as_tensor([1.0, np.inf])


def test_volume_rejects_wrong_rank_and_empty_extent():
    with pytest.raises(ValueError):
        FeatureVolume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        FeatureVolume(np.zeros((2, 0, 2, 1)))


def test_volume_is_immutable(rng):
    raw = rng.standard_normal((1, 2, 2, 2))
    v = FeatureVolume(raw)
    raw[0, 0, 0, 0] = 100.0
    assert v.data[0, 0, 0, 0] != 100.0
    with pytest.raises(ValueError):
        v.data[0, 0, 0, 0] = 1.0


def test_f32_precision_is_selectable():
    t = as_tensor([1, 2, 3], dtype="f32")
    assert t.dtype == np.float32
    assert as_tensor([1, 2, 3]).dtype == np.float64


def test_flatten_single_token():
    v = FeatureVolume(np.arange(5.0).reshape(1, 1, 1, 5))
    np.testing.assert_array_equal(flatten_tokens(v), np.arange(5.0).reshape(1, 5))


def test_flatten_is_frame_major():
    v = FeatureVolume(np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 1, 2, 1))
    np.testing.assert_array_equal(flatten_tokens(v), [[1.0], [2.0], [3.0], [4.0]])


def test_token_index_convention(rng):
    v = FeatureVolume(rng.standard_normal((3, 4, 5, 2)))
    tokens = flatten_tokens(v)
    np.testing.assert_array_equal(tokens[token_index(2, 1, 3, 4, 5)], v.data[2, 1, 3])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31))
def test_flatten_unflatten_bijection(f, h, w, c, seed):
    data = np.random.default_rng(seed).standard_normal((f, h, w, c))
    v = FeatureVolume(data)
    back = unflatten_tokens(flatten_tokens(v), f, h, w)
    np.testing.assert_array_equal(back.data, v.data)


def test_matmul_transpose_orthonormal_rows():
    np.testing.assert_array_equal(matmul_transpose(np.eye(2)), np.eye(2))


def test_matmul_transpose_repeated_row():
    a = np.array([[0.6, 0.8], [0.6, 0.8]])
    np.testing.assert_allclose(matmul_transpose(a), np.ones((2, 2)), atol=1e-15)


def test_matmul_transpose_matches_triple_loop(rng):
    a = rng.standard_normal((5, 3))
    oracle = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            for k in range(3):
                oracle[i, j] += a[i, k] * a[j, k]
    np.testing.assert_allclose(matmul_transpose(a), oracle, atol=1e-12)


def test_matmul_transpose_symmetry_and_diagonal(rng):
    a = rng.standard_normal((17, 6))
    g = matmul_transpose(a)
    assert np.array_equal(g, g.T)
    np.testing.assert_allclose(np.diag(g), np.sum(a * a, axis=1), rtol=1e-13)


def test_matmul_transpose_rejects_rank_mismatch():
    with pytest.raises(ValueError):
        matmul_transpose(np.zeros((2, 2, 2)))
