import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monarchpc.butterfly import (butterfly_as_monarch, butterfly_pattern_mask,
                                 butterfly_unfurl)
from monarchpc.errors import DimensionError
from monarchpc.monarch import materialize


def sparse_product(tensors):
    """Oracle: unfurl each tensor and multiply the sparse factors in
    application order (stage 1 applied first => rightmost)."""
    d = len(tensors)
    mats = [butterfly_unfurl(tensors[i - 1], i).matrix for i in range(1, d + 1)]
    prod = mats[-1]
    for m in mats[-2::-1]:
        prod = prod @ m
    return prod


def test_delta_tensor_unfurls_to_identity():
    delta = np.zeros((2, 2, 2))
    delta[0, :, 0] = 1.0
    delta[1, :, 1] = 1.0
    f = butterfly_unfurl(delta, 1)
    np.testing.assert_array_equal(f.matrix, np.eye(4))


def test_unfurl_block_diagonal_at_i_equals_d():
    r = np.random.default_rng(0)
    f = butterfly_unfurl(r.random((2, 2, 2)) + 0.1, 2)
    assert f.nonzeros == 8
    # block-diagonal with 2x2 blocks
    assert np.allclose(f.matrix[:2, 2:], 0) and np.allclose(f.matrix[2:, :2], 0)
    assert f.pattern_ok()


def test_unfurl_quadrant_diagonals_d4():
    r = np.random.default_rng(1)
    f = butterfly_unfurl(r.random((2,) * 5) + 0.1, 1)
    m = f.matrix
    for qi in (0, 1):
        for qj in (0, 1):
            quad = m[qi * 8:(qi + 1) * 8, qj * 8:(qj + 1) * 8]
            off_diag = quad - np.diag(np.diag(quad))
            assert np.allclose(off_diag, 0)
    assert f.nonzeros == 32 and f.pattern_ok()


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 5000), st.integers(2, 4))
def test_every_unfurling_matches_pattern(seed, d):
    r = np.random.default_rng(seed)
    for i in range(1, d + 1):
        f = butterfly_unfurl(r.random((2,) * (d + 1)) + 0.1, i)
        assert f.nonzeros == 2 * 2 ** d
        assert f.pattern_ok()
        mask = butterfly_pattern_mask(i, 2 ** d)
        assert int(mask.sum()) == 2 * 2 ** d
        assert ((f.matrix != 0) == mask).all()


def test_delta_tensors_compose_to_identity():
    delta = np.zeros((2, 2, 2))
    delta[0, :, 0] = 1.0
    delta[1, :, 1] = 1.0
    p = butterfly_as_monarch([delta, delta])
    np.testing.assert_allclose(materialize(p), np.eye(4), atol=1e-15)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 5000), st.integers(2, 4))
def test_as_monarch_equals_sparse_product(seed, d):
    r = np.random.default_rng(seed)
    tensors = [r.random((2,) * (d + 1)) for _ in range(d)]
    p = butterfly_as_monarch(tensors)
    assert p.in_dims == (2,) * d and p.out_dims == (2,) * d
    np.testing.assert_allclose(materialize(p), sparse_product(tensors),
                               atol=1e-12)


def test_unfurl_index_out_of_range():
    with pytest.raises(DimensionError):
        butterfly_unfurl(np.ones((2, 2, 2)), 3)
    with pytest.raises(DimensionError):
        butterfly_unfurl(np.ones((2, 3, 2)), 1)


def test_as_monarch_shape_mismatch():
    with pytest.raises(DimensionError):
        butterfly_as_monarch([np.ones((2, 2, 2)), np.ones((2, 2))])
