import numpy as np
import pytest

from dynqos.data import SparseQosTensor, generate_synthetic
from dynqos.graph import build_adjacency, fold_theta, normalize_adjacency
from dynqos.tensor_core import SparseSliceMatrix, build_mixing_matrix, facewise_transpose, sparse_theta_transform

from oracles import dense_normalized_adjacency


def one_observation():
    return SparseQosTensor((2, 3, 4), [0], [1], [2], [5.0])


def test_build_binary_and_weighted():
    A = build_adjacency(one_observation(), "binary")
    assert A.triples(2) == [(0, 1, 1.0)]
    assert all(A.slices[t].nnz == 0 for t in (0, 1, 3))
    assert build_adjacency(one_observation(), "weighted").triples(2) == [(0, 1, 5.0)]


def test_build_empty():
    empty = SparseQosTensor((2, 3, 4), [], [], [], [])
    assert build_adjacency(empty).nnz == 0


def test_build_rejects_unknown_mode():
    with pytest.raises(ValueError):
        build_adjacency(one_observation(), "fancy")


def test_normalize_hand_examples():
    single = SparseSliceMatrix.from_triples((1, 1), [[(0, 0, 1.0)]])
    assert normalize_adjacency(single).user_to_service.triples(0) == [(0, 0, 1.0)]
    star4 = SparseSliceMatrix.from_triples((1, 4), [[(0, s, 1.0) for s in range(4)]])
    assert [w for *_, w in normalize_adjacency(star4).user_to_service.triples(0)] == [0.5] * 4
    star2 = SparseSliceMatrix.from_triples((1, 2), [[(0, 0, 1.0), (0, 1, 1.0)]])
    np.testing.assert_allclose(
        [w for *_, w in normalize_adjacency(star2).user_to_service.triples(0)], [2**-0.5] * 2, rtol=1e-15
    )


@pytest.mark.parametrize("mode", ["binary", "weighted"])
def test_normalize_matches_dense_oracle(mode):
    t = generate_synthetic(9, 11, 5, 2, density=0.3, seed=3)
    adj = normalize_adjacency(build_adjacency(t, mode))
    weights = None if mode == "binary" else t.values
    expected = dense_normalized_adjacency(t.users, t.services, t.slices, t.dims, weights)
    np.testing.assert_allclose(adj.user_to_service.to_dense(), expected, rtol=1e-14, atol=0)
    assert not adj.theta_applied


def test_transpose_coherence():
    t = generate_synthetic(9, 11, 5, 2, density=0.3, seed=4)
    adj = fold_theta(normalize_adjacency(build_adjacency(t)), build_mixing_matrix(5, 2))
    assert np.array_equal(adj.service_to_user.to_dense(), facewise_transpose(adj.user_to_service.to_dense()))


def power_iteration_norm(A, iters=500):
    x = np.random.default_rng(0).normal(size=A.shape[1])
    for _ in range(iters):
        y = A.T @ (A @ x)
        n = np.linalg.norm(y)
        if n == 0:
            return 0.0
        x = y / n
    return float(np.sqrt(np.linalg.norm(A.T @ (A @ x)) / np.linalg.norm(x)))


def test_spectral_bound_binary():
    for seed in range(5):
        t = generate_synthetic(8, 12, 3, 2, density=0.4, seed=seed)
        adj = normalize_adjacency(build_adjacency(t, "binary"))
        for S in adj.user_to_service.slices:
            assert power_iteration_norm(S.toarray()) <= 1 + 1e-6
            assert np.linalg.norm(S.toarray(), 2) <= 1 + 1e-12


def test_fold_identity_and_double_fold():
    t = generate_synthetic(5, 6, 4, 2, density=0.5, seed=5)
    adj = normalize_adjacency(build_adjacency(t))
    folded = fold_theta(adj, build_mixing_matrix(4, 0))
    assert folded.theta_applied
    assert np.array_equal(folded.user_to_service.to_dense(), adj.user_to_service.to_dense())
    with pytest.raises(ValueError, match="already"):
        fold_theta(folded, build_mixing_matrix(4, 0))


def test_fold_spreads_single_edge():
    # edge only in slice 1 (0-based) of T=4; column 1 of the K=1 matrix is (1/2, 1/3, 1/3, 0)
    adj = normalize_adjacency(SparseSliceMatrix.from_triples((1, 1), [[], [(0, 0, 1.0)], [], []]))
    folded = fold_theta(adj, build_mixing_matrix(4, 1)).user_to_service
    np.testing.assert_allclose(folded.to_dense().ravel(), [1 / 2, 1 / 3, 1 / 3, 0.0], rtol=0, atol=1e-15)
    assert folded.slices[3].nnz == 0


def test_fold_empty():
    adj = normalize_adjacency(SparseSliceMatrix.from_triples((2, 3), [[], [], []]))
    assert fold_theta(adj, build_mixing_matrix(3, 1)).user_to_service.nnz == 0


def test_fold_commutes_with_transpose():
    t = generate_synthetic(6, 7, 7, 2, density=0.3, seed=6)
    M = build_mixing_matrix(7, 3)
    A = normalize_adjacency(build_adjacency(t)).user_to_service
    a = sparse_theta_transform(A, M).transpose().to_dense()
    b = sparse_theta_transform(A.transpose(), M).to_dense()
    assert np.array_equal(a, b)
