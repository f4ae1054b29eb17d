import numpy as np
import pytest

from tsalign import stss as stss_mod
from tsalign.stss import compute_stss, compute_stss_rows, frame_slice
from tsalign.tensor_core import FeatureVolume, l2_normalize_channels


def unit(data):
    return l2_normalize_channels(FeatureVolume(data))


def pairwise_cosine_oracle(data):
    tokens = [np.asarray(t, dtype=float) for t in data.reshape(-1, data.shape[-1])]
    n = len(tokens)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            a, b = tokens[i], tokens[j]
            out[i, j] = float(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    return out


def test_shared_feature_gives_all_ones():
    data = np.tile(np.array([1.0, -2.0, 0.5]), (2, 2, 2, 1))
    r = compute_stss(unit(data))
    np.testing.assert_allclose(r.matrix, np.ones((8, 8)), atol=1e-12)


def test_orthogonal_tokens_give_identity():
    r = compute_stss(unit(np.eye(2).reshape(1, 1, 2, 2)))
    np.testing.assert_array_equal(r.matrix, np.eye(2))


def test_matches_pairwise_cosine_oracle(rng):
    data = rng.standard_normal((2, 2, 2, 4))
    r = compute_stss(unit(data))
    np.testing.assert_allclose(r.matrix, pairwise_cosine_oracle(data), atol=1e-10)


def test_invariants_bounds_symmetry_diagonal(rng):
    r = compute_stss(unit(rng.standard_normal((3, 3, 4, 6))))
    assert r.matrix.max() <= 1 + 1e-9 and r.matrix.min() >= -1 - 1e-9
    assert np.max(np.abs(r.matrix - r.matrix.T)) <= 1e-12
    np.testing.assert_allclose(np.diag(r.matrix), 1.0, atol=1e-9)


def test_per_frame_view_agrees_with_flat_view(rng):
    r = compute_stss(unit(rng.standard_normal((3, 2, 2, 4))))
    pf = r.per_frame
    assert pf.shape == (12, 3, 4)
    for i in range(12):
        for f in range(3):
            for s in range(4):
                assert pf[i, f, s] == r.matrix[i, f * 4 + s]


def test_unnormalized_input_is_normalized_and_counted(rng, caplog):
    data = rng.standard_normal((1, 2, 2, 3))
    before = stss_mod.auto_normalized
    r = compute_stss(FeatureVolume(data))
    assert stss_mod.auto_normalized == before + 1
    np.testing.assert_allclose(r.matrix, compute_stss(unit(data)).matrix, atol=1e-15)


def test_row_block_matches_dense_rows(rng):
    v = unit(rng.standard_normal((2, 3, 3, 5)))
    rows = np.array([1, 7, 16])
    block = compute_stss_rows(v, rows)
    np.testing.assert_allclose(block.matrix, compute_stss(v).matrix[rows], atol=1e-14)
    np.testing.assert_array_equal(frame_slice(block, 7, 1), block.per_frame[1, 1])
    with pytest.raises(IndexError):
        frame_slice(block, 2, 0)


def test_frame_slice_single_frame_is_full_row(rng):
    r = compute_stss(unit(rng.standard_normal((1, 2, 3, 4))))
    for i in range(6):
        np.testing.assert_array_equal(frame_slice(r, i, 0), r.matrix[i])


def test_frame_slice_contains_self_similarity(rng):
    f, h, w = 3, 2, 3
    r = compute_stss(unit(rng.standard_normal((f, h, w, 4))))
    for i in range(f * h * w):
        own_frame, pos = divmod(i, h * w)
        assert abs(frame_slice(r, i, own_frame)[pos] - 1.0) < 1e-12


def test_frame_slices_reconstruct_row(rng):
    r = compute_stss(unit(rng.standard_normal((4, 2, 2, 3))))
    for i in range(16):
        row = np.concatenate([frame_slice(r, i, f) for f in range(4)])
        np.testing.assert_array_equal(row, r.matrix[i])


def test_frame_slice_out_of_range(rng):
    r = compute_stss(unit(rng.standard_normal((2, 1, 2, 3))))
    with pytest.raises(IndexError):
        frame_slice(r, 4, 0)
    with pytest.raises(IndexError):
        frame_slice(r, 0, 2)


def test_permutation_equivariance(rng):
    data = rng.standard_normal((2, 3, 3, 5))
    tokens = data.reshape(-1, 5)
    perm = rng.permutation(len(tokens))
    permuted = np.empty_like(tokens)
    permuted[perm] = tokens
    r = compute_stss(unit(data)).matrix
    rp = compute_stss(unit(permuted.reshape(data.shape))).matrix
    np.testing.assert_array_equal(rp[np.ix_(perm, perm)], r)


def test_channel_rotation_invariance(rng):
    data = rng.standard_normal((2, 3, 3, 6))
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    r = compute_stss(unit(data)).matrix
    rr = compute_stss(unit(data @ q)).matrix
    np.testing.assert_allclose(rr, r, atol=1e-9)
