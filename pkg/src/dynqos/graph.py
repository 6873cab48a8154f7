"""Per-slice bipartite user-service adjacency and its symmetric normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import SparseQosTensor
from .tensor_core import MixingMatrix, SparseSliceMatrix, sparse_theta_transform

ADJACENCY_MODES = ("binary", "weighted")


@dataclass(frozen=True)
class NormalizedAdjacency:
    user_to_service: SparseSliceMatrix
    service_to_user: SparseSliceMatrix
    theta_applied: bool = False

    @property
    def T(self) -> int:
        return self.user_to_service.T


def build_adjacency(train: SparseQosTensor, mode: str = "binary") -> SparseSliceMatrix:
    """One ``numUsers x numServices`` slice per time step, an edge per observation.

    Edge weights are 1 in ``binary`` mode and the observed QoS value in
    ``weighted`` mode.
    """
    if mode not in ADJACENCY_MODES:
        raise ValueError(f"unknown adjacency mode {mode!r}; expected one of {ADJACENCY_MODES}")
    U, S, T = train.dims
    weights = np.ones(len(train)) if mode == "binary" else train.values
    slices = []
    for t in range(T):
        m = train.slices == t
        slices.append(sp.csr_matrix((weights[m], (train.users[m], train.services[m])), shape=(U, S)))
    return SparseSliceMatrix((U, S), slices)


def normalize_adjacency(A: SparseSliceMatrix) -> NormalizedAdjacency:
    """Rescale every edge to ``w / sqrt(deg_u * deg_s)`` using within-slice weighted degrees.

    No self-loops are added (the slices are rectangular), so isolated nodes
    simply keep empty rows/columns.
    """
    normed = []
    for t, S in enumerate(A.slices):
        if S.nnz and S.data.min() < 0:
            raise ValueError(f"slice {t}: adjacency weights must be non-negative")
        du = np.asarray(S.sum(axis=1)).ravel()
        ds = np.asarray(S.sum(axis=0)).ravel()
        inv_u = np.zeros_like(du)
        inv_s = np.zeros_like(ds)
        np.divide(1.0, np.sqrt(du), out=inv_u, where=du > 0)
        np.divide(1.0, np.sqrt(ds), out=inv_s, where=ds > 0)
        coo = S.tocoo()
        w = coo.data * inv_u[coo.row] * inv_s[coo.col]
        normed.append(sp.csr_matrix((w, (coo.row, coo.col)), shape=A.shape))
    fwd = SparseSliceMatrix(A.shape, normed)
    return NormalizedAdjacency(fwd, fwd.transpose(), theta_applied=False)


def fold_theta(adj: NormalizedAdjacency, theta: MixingMatrix) -> NormalizedAdjacency:
    """Precompute the mixed adjacency used on the left of every propagation product."""
    if adj.theta_applied:
        raise ValueError("mixing matrix already folded into this adjacency")
    fwd = sparse_theta_transform(adj.user_to_service, theta)
    return NormalizedAdjacency(fwd, fwd.transpose(), theta_applied=True)


def prepare_adjacency(train: SparseQosTensor, theta: MixingMatrix, mode: str = "binary") -> NormalizedAdjacency:
    return fold_theta(normalize_adjacency(build_adjacency(train, mode)), theta)
