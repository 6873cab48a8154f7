"""Third-order tensor algebra with a banded temporal mixing matrix.

Dense tensors are plain ``numpy`` float64 arrays stored slice-major, i.e. with
shape ``(T, n1, n2)``: ``X[t]`` is the frontal slice at time ``t``.  Sparse
operands are held per slice as CSR matrices (:class:`SparseSliceMatrix`).

Slice indices are 0-based throughout the code; the window of the mixing matrix
is the 1-based window ``[max(1, t-K), min(T, t+K)]`` shifted down by one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


@dataclass(frozen=True)
class MixingMatrix:
    """T x T row-stochastic band matrix averaging slices within radius K."""

    values: np.ndarray
    K: int

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def is_identity(self) -> bool:
        return self.K == 0

    def band(self, t: int) -> tuple[int, int]:
        """Half-open range ``[lo, hi)`` of slices mixed into output slice ``t``."""
        return max(0, t - self.K), min(self.T, t + self.K + 1)


def build_mixing_matrix(T: int, K: int) -> MixingMatrix:
    """Uniform temporal window of radius ``K`` over ``T`` slices.

    Row ``t`` (1-based) holds ``1 / min(2K+1, T-t+K+1, t+K)`` on every column
    of its window, which is exactly one over the window length, so rows sum
    to one.  ``K`` larger than ``(T-1)/2`` is rejected: the formula then
    overestimates the window size and rows stop summing to one.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"slice count T must be a positive integer, got {T!r}")
    if int(K) != K or K < 0:
        raise ValueError(f"window radius K must be a non-negative integer, got {K!r}")
    T, K = int(T), int(K)
    if 2 * K + 1 > T:
        raise ValueError(f"window radius K={K} violates 2K+1 <= T with T={T}")
    theta = np.zeros((T, T), dtype=np.float64)
    for t in range(1, T + 1):
        lo, hi = max(1, t - K), min(T, t + K)
        theta[t - 1, lo - 1 : hi] = 1.0 / min(2 * K + 1, T - t + K + 1, t + K)
    theta.setflags(write=False)
    return MixingMatrix(theta, K)


def _as_matrix(theta: MixingMatrix | np.ndarray) -> np.ndarray:
    return theta.values if isinstance(theta, MixingMatrix) else np.asarray(theta, dtype=np.float64)


def _check3(X: np.ndarray, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeError(f"{name} must be a third-order tensor (T, n1, n2), got shape {X.shape}")
    return X


def theta_transform(X: np.ndarray, theta: MixingMatrix | np.ndarray) -> np.ndarray:
    """Mix frontal slices: ``Y[t] = sum_r theta[t, r] * X[r]``."""
    X = _check3(X, "X")
    M = _as_matrix(theta)
    if M.shape != (X.shape[0], X.shape[0]):
        raise ShapeError(f"mixing matrix {M.shape} does not match {X.shape[0]} slices")
    if isinstance(theta, MixingMatrix) and theta.is_identity:
        return X.copy()
    T = X.shape[0]
    return (M @ X.reshape(T, -1)).reshape(X.shape)


def theta_transform_adjoint(X: np.ndarray, theta: MixingMatrix | np.ndarray) -> np.ndarray:
    """Adjoint of :func:`theta_transform` (mixing by the transposed matrix)."""
    M = _as_matrix(theta)
    if isinstance(theta, MixingMatrix) and theta.is_identity:
        return _check3(X, "X").copy()
    return theta_transform(X, M.T)


def facewise_product(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Slice-by-slice matrix product ``Z[t] = X[t] @ Y[t]``."""
    X, Y = _check3(X, "X"), _check3(Y, "Y")
    if X.shape[0] != Y.shape[0] or X.shape[2] != Y.shape[1]:
        raise ShapeError(f"facewise product of {X.shape} and {Y.shape} is undefined")
    return np.matmul(X, Y)


def theta_product(X: np.ndarray, Y: np.ndarray, theta: MixingMatrix | np.ndarray) -> np.ndarray:
    """Facewise product of the two mixed operands (no inverse transform)."""
    X, Y = _check3(X, "X"), _check3(Y, "Y")
    if X.shape[0] != Y.shape[0] or X.shape[2] != Y.shape[1]:
        raise ShapeError(f"theta product of {X.shape} and {Y.shape} is undefined")
    return facewise_product(theta_transform(X, theta), theta_transform(Y, theta))


def facewise_transpose(X: np.ndarray) -> np.ndarray:
    X = _check3(X, "X")
    return np.ascontiguousarray(X.transpose(0, 2, 1))


class SparseSliceMatrix:
    """A stack of ``T`` sparse ``n1 x n2`` slices in CSR form.

    Instances are treated as immutable; the slice matrices are shared, not
    copied, by the operations in this package.
    """

    def __init__(self, shape: tuple[int, int], slices: Sequence[sp.csr_matrix]):
        self.shape = (int(shape[0]), int(shape[1]))
        checked = []
        for t, S in enumerate(slices):
            if S.shape != self.shape:
                raise ShapeError(f"slice {t} has shape {S.shape}, expected {self.shape}")
            S = sp.csr_matrix(S, dtype=np.float64)
            S.sort_indices()
            checked.append(S)
        self.slices = tuple(checked)

    @classmethod
    def from_triples(
        cls, shape: tuple[int, int], triples: Sequence[Iterable[tuple[int, int, float]]]
    ) -> "SparseSliceMatrix":
        """One list of ``(row, col, weight)`` per slice; duplicates are rejected."""
        n1, n2 = shape
        slices = []
        for t, items in enumerate(triples):
            items = list(items)
            rows = np.array([r for r, _, _ in items], dtype=np.int64)
            cols = np.array([c for _, c, _ in items], dtype=np.int64)
            vals = np.array([w for _, _, w in items], dtype=np.float64)
            if items:
                if rows.min() < 0 or rows.max() >= n1 or cols.min() < 0 or cols.max() >= n2:
                    raise IndexError(f"slice {t}: index out of range for shape {shape}")
                keys = rows * n2 + cols
                if np.unique(keys).size != keys.size:
                    raise ValueError(f"slice {t}: duplicate (row, col) entry")
            slices.append(sp.csr_matrix((vals, (rows, cols)), shape=(n1, n2)))
        return cls(shape, slices)

    @classmethod
    def from_dense(cls, X: np.ndarray) -> "SparseSliceMatrix":
        X = _check3(X, "X")
        return cls(X.shape[1:], [sp.csr_matrix(X[t]) for t in range(X.shape[0])])

    @property
    def T(self) -> int:
        return len(self.slices)

    @property
    def nnz(self) -> int:
        return sum(S.nnz for S in self.slices)

    def triples(self, t: int) -> list[tuple[int, int, float]]:
        S = self.slices[t].tocoo()
        return [(int(r), int(c), float(w)) for r, c, w in zip(S.row, S.col, S.data)]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.T, *self.shape))
        for t, S in enumerate(self.slices):
            out[t] = S.toarray()
        return out

    def transpose(self) -> "SparseSliceMatrix":
        return SparseSliceMatrix(self.shape[::-1], [S.T.tocsr() for S in self.slices])

    def __repr__(self) -> str:
        return f"SparseSliceMatrix(shape={self.shape}, T={self.T}, nnz={self.nnz})"


def sparse_facewise_apply(A: SparseSliceMatrix, X: np.ndarray) -> np.ndarray:
    """``A[t] @ X[t]`` for every slice, with ``A`` sparse and ``X`` dense."""
    X = _check3(X, "X")
    if X.shape[0] != A.T or X.shape[1] != A.shape[1]:
        raise ShapeError(f"cannot apply sparse {A.shape} x {A.T} slices to dense {X.shape}")
    out = np.empty((A.T, A.shape[0], X.shape[2]))
    for t, S in enumerate(A.slices):
        out[t] = S @ X[t]
    return out


def sparse_theta_transform(A: SparseSliceMatrix, theta: MixingMatrix | np.ndarray) -> SparseSliceMatrix:
    """Mix the slices of a sparse stack; the result stays sparse per slice."""
    M = _as_matrix(theta)
    if M.shape != (A.T, A.T):
        raise ShapeError(f"mixing matrix {M.shape} does not match {A.T} slices")
    mixed = []
    for t in range(A.T):
        acc = sp.csr_matrix(A.shape, dtype=np.float64)
        for r in np.flatnonzero(M[t]):
            acc = acc + M[t, r] * A.slices[r]
        acc.eliminate_zeros()
        mixed.append(acc)
    return SparseSliceMatrix(A.shape, mixed)
