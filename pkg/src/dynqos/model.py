"""Latent features, spatiotemporal propagation, layer pooling and prediction.

Feature tensors are float64 arrays of shape ``(T, n, d)``.  One propagation
layer maps user features through the mixed adjacency from service features
and vice versa:

    U[l+1] = A_mixed @ mix(S[l])        (per slice)
    S[l+1] = A_mixed^T @ mix(U[l])

where ``mix`` is the theta transform of the features and ``A_mixed`` is the
normalized adjacency with the same transform folded in beforehand.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import NormalizedAdjacency
from .tensor_core import (
    MixingMatrix,
    ShapeError,
    facewise_product,
    facewise_transpose,
    sparse_facewise_apply,
    theta_transform,
)

POOLING_KINDS = ("mean", "sum", "concatenation")


class DivergenceError(FloatingPointError):
    """Non-finite values appeared in features, predictions or the loss."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class LayerStack:
    users: list[np.ndarray]
    services: list[np.ndarray]

    @property
    def L(self) -> int:
        return len(self.users) - 1


def init_features(n: int, d: int, T: int, seed: int | np.random.Generator) -> np.ndarray:
    """Glorot-uniform features in ``[-b, b]`` with ``b = sqrt(6 / (n + d))``."""
    if min(n, d, T) < 1:
        raise ValueError(f"feature dims must be positive, got n={n}, d={d}, T={T}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (n + d))
    return rng.uniform(-bound, bound, size=(T, n, d))


def _check_finite(X: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(X)):
        raise DivergenceError(f"non-finite values in {what}")
    return X


def _check_inputs(adj: NormalizedAdjacency, theta: MixingMatrix, U0: np.ndarray, S0: np.ndarray, L: int):
    n_u, n_s = adj.user_to_service.shape
    T = adj.T
    if L < 0:
        raise ValueError(f"layer count must be >= 0, got {L}")
    if U0.ndim != 3 or S0.ndim != 3:
        raise ShapeError("features must have shape (T, n, d)")
    if U0.shape[:2] != (T, n_u) or S0.shape[:2] != (T, n_s) or U0.shape[2] != S0.shape[2]:
        raise ShapeError(f"features {U0.shape}, {S0.shape} do not match adjacency ({T}, {n_u}, {n_s})")
    if theta.T != T:
        raise ShapeError(f"mixing matrix has {theta.T} slices, adjacency has {T}")


def propagate(
    adj: NormalizedAdjacency, theta: MixingMatrix, U0: np.ndarray, S0: np.ndarray, L: int
) -> LayerStack:
    """Run ``L`` linear propagation layers; the stack includes layer 0."""
    if not adj.theta_applied:
        raise ValueError("propagate expects an adjacency with the mixing matrix folded in")
    _check_inputs(adj, theta, U0, S0, L)
    users, services = [U0], [S0]
    for _ in range(L):
        U_next = sparse_facewise_apply(adj.user_to_service, theta_transform(services[-1], theta))
        S_next = sparse_facewise_apply(adj.service_to_user, theta_transform(users[-1], theta))
        users.append(_check_finite(U_next, f"user layer {len(users)}"))
        services.append(_check_finite(S_next, f"service layer {len(services)}"))
    return LayerStack(users, services)


@dataclass
class FullLayerParams:
    """Per-layer square transforms for the non-simplified propagation rule."""

    W: list[np.ndarray]
    B: list[np.ndarray]
    activation: str = "sigmoid"


def _activate(X: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return X
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * X))
    raise ValueError(f"unknown activation {kind!r}")


def propagate_full(
    adj: NormalizedAdjacency,
    theta: MixingMatrix,
    U0: np.ndarray,
    S0: np.ndarray,
    params: FullLayerParams,
    L: int,
) -> LayerStack:
    """Propagation with a mixed feature transform and activation after each layer.

    ``U[l+1] = act((A * S[l]) * W[l])`` where ``*`` is the theta product, and
    symmetrically for services with ``B[l]``.
    """
    if not adj.theta_applied:
        raise ValueError("propagate_full expects an adjacency with the mixing matrix folded in")
    _check_inputs(adj, theta, U0, S0, L)
    if len(params.W) < L or len(params.B) < L:
        raise ValueError(f"need {L} W and B tensors, got {len(params.W)} and {len(params.B)}")
    T, _, d = U0.shape
    for X in (*params.W[:L], *params.B[:L]):
        if X.shape != (T, d, d):
            raise ShapeError(f"layer transforms must have shape {(T, d, d)}, got {X.shape}")
    users, services = [U0], [S0]
    for l in range(L):
        msg_u = sparse_facewise_apply(adj.user_to_service, theta_transform(services[-1], theta))
        msg_s = sparse_facewise_apply(adj.service_to_user, theta_transform(users[-1], theta))
        U_next = facewise_product(theta_transform(msg_u, theta), theta_transform(params.W[l], theta))
        S_next = facewise_product(theta_transform(msg_s, theta), theta_transform(params.B[l], theta))
        users.append(_check_finite(_activate(U_next, params.activation), f"user layer {l + 1}"))
        services.append(_check_finite(_activate(S_next, params.activation), f"service layer {l + 1}"))
    return LayerStack(users, services)


def pool_layers(layers: list[np.ndarray], kind: str = "mean") -> np.ndarray:
    if not layers:
        raise ValueError("cannot pool an empty layer stack")
    if kind == "mean":
        return np.mean(np.stack(layers), axis=0)
    if kind == "sum":
        return np.sum(np.stack(layers), axis=0)
    if kind == "concatenation":
        return np.concatenate(layers, axis=2)
    raise ValueError(f"unknown pooling kind {kind!r}; expected one of {POOLING_KINDS}")


def pool(stack: LayerStack, kind: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    return pool_layers(stack.users, kind), pool_layers(stack.services, kind)


def unpool_gradient(G: np.ndarray, n_layers: int, kind: str) -> list[np.ndarray]:
    """Split the gradient w.r.t. pooled features into per-layer gradients."""
    if kind == "mean":
        return [G / n_layers for _ in range(n_layers)]
    if kind == "sum":
        return [G.copy() for _ in range(n_layers)]
    if kind == "concatenation":
        return [np.ascontiguousarray(part) for part in np.split(G, n_layers, axis=2)]
    raise ValueError(f"unknown pooling kind {kind!r}; expected one of {POOLING_KINDS}")


def predict_dense(U: np.ndarray, S: np.ndarray) -> np.ndarray:
    """All predictions as a ``(T, numUsers, numServices)`` array."""
    if U.shape[0] != S.shape[0] or U.shape[2] != S.shape[2]:
        raise ShapeError(f"cannot pair user features {U.shape} with service features {S.shape}")
    return facewise_product(U, facewise_transpose(S))


def predict_entries(U: np.ndarray, S: np.ndarray, users, services, slices) -> np.ndarray:
    """Predictions at the given ``(user, service, slice)`` coordinates only."""
    if U.shape[0] != S.shape[0] or U.shape[2] != S.shape[2]:
        raise ShapeError(f"cannot pair user features {U.shape} with service features {S.shape}")
    return np.einsum("nd,nd->n", U[slices, users], S[slices, services])


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "dynqos-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to reproduce predictions of a trained model.

    ``edges`` holds the training observations the adjacency was built from as
    rows of ``(user, service, slice)``; ``edge_values`` their QoS values.
    """

    dims: tuple[int, int, int]
    config: dict
    U0: np.ndarray
    S0: np.ndarray
    edges: np.ndarray
    edge_values: np.ndarray
    extra: dict | None = None


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write an uncompressed ``.npz`` archive.

    Members: ``meta`` (UTF-8 JSON bytes with format, version, dims, config,
    extra), ``U0`` and ``S0`` (float64, shape ``(T, n, d)``), ``edges``
    (int64, shape ``(m, 3)``) and ``edge_values`` (float64, shape ``(m,)``).
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": list(ckpt.dims),
        "config": ckpt.config,
        "extra": ckpt.extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
            U0=ckpt.U0,
            S0=ckpt.S0,
            edges=np.asarray(ckpt.edges, dtype=np.int64).reshape(-1, 3),
            edge_values=np.asarray(ckpt.edge_values, dtype=np.float64),
        )
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        return Checkpoint(
            dims=tuple(meta["dims"]),
            config=meta["config"],
            U0=z["U0"],
            S0=z["S0"],
            edges=z["edges"],
            edge_values=z["edge_values"],
            extra=meta["extra"],
        )
