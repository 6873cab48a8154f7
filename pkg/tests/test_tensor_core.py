import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from dynqos.tensor_core import (
    ShapeError,
    SparseSliceMatrix,
    build_mixing_matrix,
    facewise_product,
    facewise_transpose,
    sparse_facewise_apply,
    sparse_theta_transform,
    theta_product,
    theta_transform,
    theta_transform_adjoint,
)

from oracles import naive_facewise, naive_mixing_matrix, naive_theta_transform


# -- mixing matrix ------------------------------------------------------------


@pytest.mark.parametrize("T", [1, 2, 5, 64])
def test_k0_is_identity(T):
    assert np.array_equal(build_mixing_matrix(T, 0).values, np.eye(T))


def test_hand_derived_matrices():
    np.testing.assert_allclose(
        build_mixing_matrix(3, 1).values,
        [[1 / 2, 1 / 2, 0], [1 / 3, 1 / 3, 1 / 3], [0, 1 / 2, 1 / 2]],
        rtol=0, atol=1e-15,
    )
    np.testing.assert_allclose(
        build_mixing_matrix(4, 1).values,
        [[1 / 2, 1 / 2, 0, 0], [1 / 3, 1 / 3, 1 / 3, 0], [0, 1 / 3, 1 / 3, 1 / 3], [0, 0, 1 / 2, 1 / 2]],
        rtol=0, atol=1e-15,
    )


def test_mixing_matrix_rows_and_band():
    for T in range(2, 65):
        for K in range(0, (T - 1) // 2 + 1):
            M = build_mixing_matrix(T, K).values
            np.testing.assert_allclose(M.sum(axis=1), 1.0, rtol=0, atol=1e-12)
            t, i = np.indices(M.shape)
            assert np.all(M[np.abs(t - i) > K] == 0)


def test_mixing_matrix_matches_window_average():
    for T, K in [(7, 3), (10, 2), (64, 8)]:
        np.testing.assert_allclose(build_mixing_matrix(T, K).values, naive_mixing_matrix(T, K), rtol=0, atol=1e-15)


@pytest.mark.parametrize("T,K", [(3, 2), (4, 2), (1, 1), (64, 32)])
def test_oversized_window_rejected(T, K):
    with pytest.raises(ValueError, match="2K\\+1 <= T"):
        build_mixing_matrix(T, K)


@pytest.mark.parametrize("T,K", [(0, 0), (3, -1), (3, 0.5)])
def test_invalid_mixing_arguments(T, K):
    with pytest.raises(ValueError):
        build_mixing_matrix(T, K)


# -- theta transform ----------------------------------------------------------


def test_theta_transform_identity_and_permutation():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4, 3, 2))
    assert np.array_equal(theta_transform(X, build_mixing_matrix(4, 0)), X)
    A, B = rng.normal(size=(2, 3, 3))
    Y = theta_transform(np.stack([A, B]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.array_equal(Y[0], B) and np.array_equal(Y[1], A)


def test_theta_transform_scalar_example():
    X = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
    Y = theta_transform(X, build_mixing_matrix(3, 1))
    np.testing.assert_allclose(Y.ravel(), [1.5, 2.0, 2.5], rtol=0, atol=1e-15)


def test_theta_transform_shape_mismatch():
    with pytest.raises(ShapeError):
        theta_transform(np.zeros((3, 2, 2)), build_mixing_matrix(4, 1))


def test_constant_slices_preserved():
    slice_ = np.random.default_rng(1).normal(size=(3, 4))
    X = np.repeat(slice_[None], 9, axis=0)
    for K in range(5):
        np.testing.assert_allclose(theta_transform(X, build_mixing_matrix(9, K)), X, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.data())
def test_theta_transform_linear(T, data):
    K = data.draw(st.integers(0, (T - 1) // 2))
    seed = data.draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(2, T, 3, 4))
    a, b = rng.normal(size=2)
    M = build_mixing_matrix(T, K)
    np.testing.assert_allclose(
        theta_transform(a * X + b * Y, M),
        a * theta_transform(X, M) + b * theta_transform(Y, M),
        rtol=0, atol=1e-10,
    )


def test_adjoint_identity():
    rng = np.random.default_rng(2)
    M = build_mixing_matrix(7, 2)
    X, Y = rng.normal(size=(2, 7, 3, 5))
    lhs = np.vdot(theta_transform(X, M), Y)
    rhs = np.vdot(X, theta_transform_adjoint(Y, M))
    assert lhs == pytest.approx(rhs, rel=1e-12)


# -- facewise products --------------------------------------------------------


def test_facewise_identity_and_scalars():
    X = np.random.default_rng(3).normal(size=(3, 4, 5))
    I = np.repeat(np.eye(5)[None], 3, axis=0)
    assert np.array_equal(facewise_product(X, I), X)
    Z = facewise_product(np.array([2.0, 3.0]).reshape(2, 1, 1), np.array([4.0, 5.0]).reshape(2, 1, 1))
    assert Z.ravel().tolist() == [8.0, 15.0]


def test_facewise_matches_triple_loop():
    rng = np.random.default_rng(4)
    X, Y = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))
    np.testing.assert_allclose(facewise_product(X, Y), naive_facewise(X, Y), rtol=0, atol=1e-12)


@pytest.mark.parametrize("xs,ys", [((2, 3, 4), (2, 5, 2)), ((2, 3, 4), (3, 4, 2))])
def test_facewise_mismatch(xs, ys):
    with pytest.raises(ShapeError):
        facewise_product(np.zeros(xs), np.zeros(ys))


def test_facewise_algebra():
    rng = np.random.default_rng(5)
    X, X2 = rng.normal(size=(2, 5, 3, 4))
    Y, Y2 = rng.normal(size=(2, 5, 4, 2))
    W = rng.normal(size=(5, 2, 6))
    np.testing.assert_allclose(facewise_product(X + X2, Y), facewise_product(X, Y) + facewise_product(X2, Y), atol=1e-12)
    np.testing.assert_allclose(facewise_product(X, Y + Y2), facewise_product(X, Y) + facewise_product(X, Y2), atol=1e-12)
    np.testing.assert_allclose(
        facewise_product(facewise_product(X, Y), W), facewise_product(X, facewise_product(Y, W)), atol=1e-12
    )


def test_theta_product_examples():
    rng = np.random.default_rng(6)
    X, Y = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 2))
    assert np.array_equal(theta_product(X, Y, build_mixing_matrix(4, 0)), facewise_product(X, Y))
    Z = theta_product(
        np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1), np.ones((3, 1, 1)), build_mixing_matrix(3, 1)
    )
    np.testing.assert_allclose(Z.ravel(), [1.5, 2.0, 2.5], rtol=0, atol=1e-15)
    assert np.array_equal(theta_product(X, np.zeros_like(Y), build_mixing_matrix(4, 1)), np.zeros((4, 3, 2)))


def test_facewise_transpose():
    X = np.random.default_rng(7).normal(size=(3, 1, 1))
    assert np.array_equal(facewise_transpose(X), X)
    Y = np.repeat(np.array([[1.0, 2.0], [3.0, 4.0]])[None], 3, axis=0)
    assert facewise_transpose(Y)[2].tolist() == [[1.0, 3.0], [2.0, 4.0]]
    Z = np.random.default_rng(8).normal(size=(4, 2, 5))
    assert facewise_transpose(Z).shape == (4, 5, 2)
    assert np.array_equal(facewise_transpose(facewise_transpose(Z)), Z)


# -- sparse slices ------------------------------------------------------------


def test_sparse_apply_empty_and_single_edge():
    X = np.random.default_rng(9).normal(size=(3, 4, 2))
    empty = SparseSliceMatrix.from_triples((5, 4), [[], [], []])
    assert np.array_equal(sparse_facewise_apply(empty, X), np.zeros((3, 5, 2)))
    one = SparseSliceMatrix.from_triples((5, 4), [[(0, 0, 2.5)]] * 3)
    out = sparse_facewise_apply(one, X)
    assert np.array_equal(out[:, 0], 2.5 * X[:, 0])
    assert not out[:, 1:].any()


def test_sparse_apply_matches_dense():
    rng = np.random.default_rng(10)
    dense = rng.normal(size=(6, 30, 40)) * (rng.random((6, 30, 40)) < 0.1)
    A = SparseSliceMatrix.from_dense(dense)
    X = rng.normal(size=(6, 40, 3))
    assert np.max(np.abs(sparse_facewise_apply(A, X) - facewise_product(dense, X))) < 1e-12


def test_sparse_apply_mismatch():
    A = SparseSliceMatrix.from_triples((2, 3), [[], []])
    with pytest.raises(ShapeError):
        sparse_facewise_apply(A, np.zeros((2, 4, 1)))
    with pytest.raises(ShapeError):
        sparse_facewise_apply(A, np.zeros((3, 3, 1)))


def test_sparse_slice_validation():
    with pytest.raises(ValueError, match="duplicate"):
        SparseSliceMatrix.from_triples((2, 2), [[(0, 1, 1.0), (0, 1, 2.0)]])
    with pytest.raises(IndexError):
        SparseSliceMatrix.from_triples((2, 2), [[(2, 0, 1.0)]])
    with pytest.raises(ShapeError):
        SparseSliceMatrix((2, 2), [sp.csr_matrix((3, 2))])


def test_sparse_roundtrip_and_transpose():
    rng = np.random.default_rng(11)
    dense = rng.normal(size=(3, 4, 5)) * (rng.random((3, 4, 5)) < 0.4)
    A = SparseSliceMatrix.from_dense(dense)
    assert np.array_equal(A.to_dense(), dense)
    assert np.array_equal(A.transpose().to_dense(), facewise_transpose(dense))
    rebuilt = SparseSliceMatrix.from_triples(A.shape, [A.triples(t) for t in range(A.T)])
    assert np.array_equal(rebuilt.to_dense(), dense)


def test_sparse_theta_transform_matches_dense():
    rng = np.random.default_rng(12)
    dense = rng.random((7, 4, 5)) * (rng.random((7, 4, 5)) < 0.3)
    M = build_mixing_matrix(7, 2)
    mixed = sparse_theta_transform(SparseSliceMatrix.from_dense(dense), M)
    np.testing.assert_allclose(mixed.to_dense(), naive_theta_transform(dense, M.values), rtol=0, atol=1e-14)
