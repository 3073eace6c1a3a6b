import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monarchpc import monarch as M
from monarchpc.errors import ContractError, DimensionError

rng = np.random.default_rng


def random_factorization(seed, max_depth=4, max_dim=4):
    r = rng(seed)
    d = int(r.integers(2, max_depth + 1))
    in_dims = tuple(int(v) for v in r.integers(2, max_dim + 1, size=d))
    out_dims = tuple(int(v) for v in r.integers(2, max_dim + 1, size=d))
    factors = [r.random(M.factor_shape(t, in_dims, out_dims)) + 0.05
               for t in range(d)]
    return M.MonarchParam(in_dims, out_dims, factors)


@settings(deadline=None, max_examples=60)
@given(st.integers(0, 10_000))
def test_apply_equals_materialize(seed):
    p = random_factorization(seed)
    x = rng(seed + 1).random(p.in_dim)
    got = M.monarch_apply(p, x)
    want = M.materialize(p) @ x
    np.testing.assert_allclose(got, want, rtol=1e-12)


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 10_000))
def test_kronecker_law_two_layers(seed):
    r = rng(seed)
    a = r.random((int(r.integers(2, 7)), int(r.integers(2, 7))))
    b = r.random((int(r.integers(2, 7)), int(r.integers(2, 7))))
    p = M.tied_monarch([a, b])
    x = r.random(p.in_dim)
    np.testing.assert_allclose(M.monarch_apply(p, x), np.kron(a, b) @ x,
                               rtol=1e-12)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_multi_kronecker_law(seed, depth):
    r = rng(seed)
    mats = [r.random((int(r.integers(2, 4)), int(r.integers(2, 4))))
            for _ in range(depth)]
    p = M.tied_monarch(mats)
    x = r.random(p.in_dim)
    K = mats[0]
    for m in mats[1:]:
        K = np.kron(K, m)
    np.testing.assert_allclose(M.monarch_apply(p, x), K @ x, rtol=1e-12)
    np.testing.assert_allclose(M.materialize(p), K, rtol=1e-12)


def test_identity_factors_give_identity():
    eye = [np.eye(2), np.eye(2)]
    p = M.tied_monarch(eye)
    x = np.arange(4.0)
    np.testing.assert_array_equal(M.monarch_apply(p, x), x)
    np.testing.assert_array_equal(M.materialize(p), np.eye(4))


def test_logspace_matches_linear():
    p = random_factorization(3)
    x = rng(4).random(p.in_dim) + 0.01
    logy, _ = M.monarch_apply_logspace(p, np.log(x))
    np.testing.assert_allclose(np.exp(logy), M.monarch_apply(p, x), rtol=1e-10)


def test_logspace_all_ones_d2():
    p = M.MonarchParam((2, 2), (2, 2),
                       [np.ones(M.factor_shape(t, (2, 2), (2, 2)))
                        for t in range(2)])
    logy, _ = M.monarch_apply_logspace(p, np.zeros(4))
    np.testing.assert_allclose(logy, np.log(4.0), atol=1e-12)


def test_logspace_neg_inf_inputs():
    p = random_factorization(9)
    logx = np.log(rng(5).random(p.in_dim) + 0.1)
    logx[0] = -np.inf
    logy, _ = M.monarch_apply_logspace(p, logx)
    assert np.isfinite(logy).all()  # every output has some positive path
    x = np.exp(logx)
    np.testing.assert_allclose(np.exp(logy), M.monarch_apply(p, x), rtol=1e-10)


def test_apply_transpose():
    p = random_factorization(11)
    Mat = M.materialize(p)
    y = rng(12).random(p.out_dim)
    np.testing.assert_allclose(M.monarch_apply_transpose(p, y), Mat.T @ y,
                               rtol=1e-12)
    k = 1
    np.testing.assert_allclose(M.param_row(p, k), Mat[k], rtol=1e-12)


def test_batched_apply_matches_loop():
    p = random_factorization(21)
    X = rng(22).random((5, p.in_dim))
    batched = M.monarch_apply(p, X)
    for i in range(5):
        np.testing.assert_allclose(batched[i], M.monarch_apply(p, X[i]),
                                   rtol=1e-13)


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 10_000))
def test_row_stochastic_closure(seed):
    # slice-stochastic factors materialize to a row-stochastic matrix
    r = rng(seed)
    d = int(r.integers(2, 4))
    dims = tuple(int(v) for v in r.integers(2, 4, size=d))
    p = M.random_monarch(r, dims, dims)
    assert M.row_stochastic_error(p) < 1e-12
    rows = M.materialize(p).sum(axis=1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-8)


def test_untie_is_exact_and_independent():
    r = rng(33)
    a, b = r.random((3, 3)), r.random((3, 3))
    tied = M.tied_monarch([a, b])
    untied = M.untie_param(tied)
    x = r.random(9)
    assert (M.monarch_apply(tied, x) == M.monarch_apply(untied, x)).all()
    # perturbing one slice leaves sibling slices alone
    untied.factors[0][0, 0, 1] += 0.5
    assert untied.factors[0][0, 0, 0] == a[0, 0]
    assert (untied.factors[0][:, :, 0] == a).all()


def test_untied_square_element_count():
    h = 16
    p = M.untie_param(M.tied_monarch([np.ones((4, 4)), np.ones((4, 4))]))
    assert M.param_element_count(p) == 2 * int(h ** 1.5)


def test_factor_shape_validation():
    with pytest.raises(DimensionError):
        M.MonarchParam((2, 2), (2, 2), [np.ones((2, 2, 3)), np.ones((2, 2, 2))])


def test_materialize_size_guard():
    p = M.tied_monarch([np.ones((64, 64)), np.ones((64, 64))])
    with pytest.raises(ContractError):
        M.materialize(p)


def test_em_row_update_floor_and_normalize():
    old = np.array([[0.5, 0.5]])
    acc = np.array([[3.0, 0.0]])
    new = M.row_convex_update(old, acc, eta=1.0, floor=1e-8)
    assert abs(new.sum() - 1.0) < 1e-12
    assert new.min() >= 1e-8 * (1 - 1e-6)
    np.testing.assert_allclose(new[0, 0], 1.0, atol=1e-7)
    # zero-count rows keep the old value
    kept = M.row_convex_update(old, np.zeros((1, 2)), eta=1.0, floor=1e-8)
    np.testing.assert_allclose(kept, old, atol=1e-12)


def test_em_update_monarch_slices():
    p = random_factorization(44)
    acc = [np.abs(rng(45).random(f.shape)) for f in p.factors]
    M.em_update_param_(p, acc, eta=1.0, floor=1e-8)
    assert M.row_stochastic_error(p) < 1e-9
    assert M.param_min_entry(p) >= 1e-8 * (1 - 1e-6)


def test_scale_and_zero_state_helpers():
    p = random_factorization(55)
    Mat = M.materialize(p)
    si = rng(56).random(p.in_dim) + 0.1
    so = rng(57).random(p.out_dim) + 0.1
    M.scale_input_states_(p, si)
    M.scale_output_states_(p, so)
    np.testing.assert_allclose(M.materialize(p), so[:, None] * Mat * si[None, :],
                               rtol=1e-12)
    dead = np.array([0, 2])
    M.zero_output_states_(p, dead)
    assert np.allclose(M.materialize(p)[dead], 0.0)


def test_rebalance_slices_preserves_map():
    p = random_factorization(66)
    M.scale_output_states_(p, 1.0 / M.row_masses(p))
    before = M.materialize(p)
    M.rebalance_slices_(p)
    np.testing.assert_allclose(M.materialize(p), before, rtol=1e-9)
    assert M.row_stochastic_error(p) < 1e-12
