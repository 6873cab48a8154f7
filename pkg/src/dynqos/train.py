"""Regularized least-squares objective, exact gradients, Adam, and the fit loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import DataError, DatasetSplit, SparseQosTensor, round_half_up
from .graph import ADJACENCY_MODES, NormalizedAdjacency, prepare_adjacency
from .model import (
    POOLING_KINDS,
    Checkpoint,
    DivergenceError,
    init_features,
    pool,
    predict_entries,
    propagate,
    unpool_gradient,
)
from .tensor_core import MixingMatrix, ShapeError, build_mixing_matrix, sparse_facewise_apply, theta_transform_adjoint

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    d: int = 32
    L: int = 3
    K: int = 2
    pooling: str = "mean"
    tau: float = 1e-2
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    patience: int = 30
    seed: int = 0
    adjacency_mode: str = "binary"
    val_fraction: float = 0.1

    def validate(self, T: int | None = None) -> "TrainConfig":
        checks = [
            (self.d >= 1, f"d must be >= 1, got {self.d}"),
            (self.L >= 0, f"L must be >= 0, got {self.L}"),
            (self.K >= 0, f"K must be >= 0, got {self.K}"),
            (self.pooling in POOLING_KINDS, f"pooling must be one of {POOLING_KINDS}, got {self.pooling!r}"),
            (self.tau >= 0, f"tau must be >= 0, got {self.tau}"),
            (self.learning_rate > 0, f"learning_rate must be > 0, got {self.learning_rate}"),
            (self.max_epochs >= 1, f"max_epochs must be >= 1, got {self.max_epochs}"),
            (self.patience >= 1, f"patience must be >= 1, got {self.patience}"),
            (self.adjacency_mode in ADJACENCY_MODES, f"adjacency_mode must be one of {ADJACENCY_MODES}"),
            (0 <= self.val_fraction < 1, f"val_fraction must lie in [0, 1), got {self.val_fraction}"),
        ]
        if T is not None:
            checks.append((2 * self.K + 1 <= T, f"K={self.K} violates the 2K+1 <= T rule for T={T}"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(names)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in values.items():
            typ = type(getattr(cls(), k))
            try:
                kwargs[k] = typ(v)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {k}: {v!r}") from None
            if typ is int and float(v) != kwargs[k]:
                raise ConfigError(f"{k} must be an integer, got {v!r}")
        return cls(**kwargs)


# -- objective and gradients --------------------------------------------------


def forward(
    adj: NormalizedAdjacency, theta: MixingMatrix, U0: np.ndarray, S0: np.ndarray, L: int, pooling: str
) -> tuple[np.ndarray, np.ndarray]:
    """Pooled user and service features."""
    return pool(propagate(adj, theta, U0, S0, L), pooling)


def loss(
    predictions: np.ndarray, observed: SparseQosTensor, U0: np.ndarray, S0: np.ndarray, tau: float
) -> float:
    """Sum of squared residuals on observed entries plus ``tau`` times the squared
    Frobenius norms of the initial feature tensors."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape != observed.values.shape:
        raise ShapeError(f"{predictions.size} predictions for {len(observed)} observed entries")
    r = observed.values - predictions
    return float(r @ r + tau * (np.vdot(U0, U0) + np.vdot(S0, S0)))


def _residual_slices(entries: SparseQosTensor, coef: np.ndarray) -> list[sp.csr_matrix]:
    U, S, T = entries.dims
    out = []
    for t in range(T):
        m = entries.slices == t
        out.append(sp.csr_matrix((coef[m], (entries.users[m], entries.services[m])), shape=(U, S)))
    return out


def loss_and_gradients(
    adj: NormalizedAdjacency,
    theta: MixingMatrix,
    U0: np.ndarray,
    S0: np.ndarray,
    entries: SparseQosTensor,
    L: int,
    pooling: str,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Objective value, its gradients w.r.t. ``U0`` and ``S0``, and the pooled features.

    Propagation is linear, so the backward pass runs the adjoint layers: the
    transposed sparse slices followed by mixing with the transposed matrix.
    """
    stack = propagate(adj, theta, U0, S0, L)
    U, S = pool(stack, pooling)
    pred = predict_entries(U, S, entries.users, entries.services, entries.slices)
    value = loss(pred, entries, U0, S0, tau)
    if not np.isfinite(value):
        raise DivergenceError("objective is not finite")

    # dE/dpred = 2 (pred - q)
    R = _residual_slices(entries, 2.0 * (pred - entries.values))
    GU = np.stack([R[t] @ S[t] for t in range(len(R))])
    GS = np.stack([R[t].T @ U[t] for t in range(len(R))])

    gU = unpool_gradient(GU, L + 1, pooling)
    gS = unpool_gradient(GS, L + 1, pooling)
    for l in range(L - 1, -1, -1):
        gS[l] += theta_transform_adjoint(sparse_facewise_apply(adj.service_to_user, gU[l + 1]), theta)
        gU[l] += theta_transform_adjoint(sparse_facewise_apply(adj.user_to_service, gS[l + 1]), theta)
    grad_U = gU[0] + 2.0 * tau * U0
    grad_S = gS[0] + 2.0 * tau * S0
    if not (np.all(np.isfinite(grad_U)) and np.all(np.isfinite(grad_S))):
        raise DivergenceError("gradient is not finite")
    return value, grad_U, grad_S, (U, S)


def gradients(
    config: TrainConfig,
    adj: NormalizedAdjacency,
    theta: MixingMatrix,
    U0: np.ndarray,
    S0: np.ndarray,
    entries: SparseQosTensor,
) -> tuple[np.ndarray, np.ndarray]:
    _, gU, gS, _ = loss_and_gradients(adj, theta, U0, S0, entries, config.L, config.pooling, config.tau)
    return gU, gS


# -- optimizer ----------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int
    U0: np.ndarray
    S0: np.ndarray
    m_U: np.ndarray
    v_U: np.ndarray
    m_S: np.ndarray
    v_S: np.ndarray
    step: int = 0
    best_val: float = float("inf")
    best_epoch: int = 0

    @classmethod
    def fresh(cls, U0: np.ndarray, S0: np.ndarray) -> "TrainState":
        z = np.zeros_like
        return cls(0, U0, S0, z(U0), z(U0), z(S0), z(S0))


def adam_step(
    state: TrainState,
    grads: tuple[np.ndarray, np.ndarray],
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """One bias-corrected Adam update of ``(U0, S0)``; returns a new state."""
    gU, gS = grads
    if gU.shape != state.U0.shape or gS.shape != state.S0.shape:
        raise ShapeError(f"gradient shapes {gU.shape}, {gS.shape} do not match parameters")
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step

    def update(p, m, v, g):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        p = p - learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
        return p, m, v

    U0, m_U, v_U = update(state.U0, state.m_U, state.v_U, gU)
    S0, m_S, v_S = update(state.S0, state.m_S, state.v_S, gS)
    return dataclasses.replace(state, U0=U0, S0=S0, m_U=m_U, v_U=v_U, m_S=m_S, v_S=v_S, step=step)


# -- training loop ------------------------------------------------------------


@dataclass
class FitResult:
    state: TrainState
    history: list[dict]
    config: TrainConfig
    theta: MixingMatrix
    adjacency: NormalizedAdjacency
    fit_entries: SparseQosTensor
    val_entries: SparseQosTensor | None = None
    stopped_early: bool = False

    def pooled_features(self) -> tuple[np.ndarray, np.ndarray]:
        return forward(self.adjacency, self.theta, self.state.U0, self.state.S0, self.config.L, self.config.pooling)

    def predict(self, entries: SparseQosTensor) -> np.ndarray:
        U, S = self.pooled_features()
        return predict_entries(U, S, entries.users, entries.services, entries.slices)

    def checkpoint(self) -> Checkpoint:
        e = self.fit_entries
        return Checkpoint(
            dims=e.dims,
            config=self.config.to_dict(),
            U0=self.state.U0,
            S0=self.state.S0,
            edges=np.column_stack([e.users, e.services, e.slices]),
            edge_values=e.values,
            extra={"best_epoch": self.state.best_epoch, "epochs_run": len(self.history)},
        )


def carve_validation(
    train: SparseQosTensor, fraction: float, seed: int
) -> tuple[SparseQosTensor, SparseQosTensor | None]:
    """Hold out ``round(fraction * N)`` training entries (at least one) for early stopping."""
    n = len(train)
    if fraction == 0 or n < 2:
        return train, None
    n_val = min(max(round_half_up(fraction * n), 1), n - 1)
    perm = np.random.default_rng([seed, 1]).permutation(n)
    return train.subset(np.sort(perm[n_val:])), train.subset(np.sort(perm[:n_val]))


def fit(config: TrainConfig, split: DatasetSplit | SparseQosTensor) -> FitResult:
    """Full-batch Adam on the training entries with early stopping.

    Each epoch evaluates the objective and validation RMSE at the current
    parameters, records them, then takes one optimizer step.  Training stops
    after ``max_epochs`` or once ``patience`` consecutive epochs fail to improve
    the best validation RMSE (the training loss when no validation set is
    carved).  The returned state holds the best parameters seen.

    ``split`` may also be a bare training tensor; the test side is never used
    here anyway.
    """
    train = split if isinstance(split, SparseQosTensor) else split.train
    if len(train) == 0:
        raise DataError("training set is empty")
    n_users, n_services, T = train.dims
    config.validate(T)

    fit_entries, val_entries = carve_validation(train, config.val_fraction, config.seed)
    theta = build_mixing_matrix(T, config.K)
    adj = prepare_adjacency(fit_entries, theta, config.adjacency_mode)
    rng = np.random.default_rng([config.seed, 0])
    U0 = init_features(n_users, config.d, T, rng)
    S0 = init_features(n_services, config.d, T, rng)
    state = TrainState.fresh(U0, S0)
    best = (U0, S0)

    history: list[dict] = []
    wait = 0
    stopped_early = False
    for epoch in range(1, config.max_epochs + 1):
        try:
            value, gU, gS, (U, S) = loss_and_gradients(
                adj, theta, state.U0, state.S0, fit_entries, config.L, config.pooling, config.tau
            )
        except DivergenceError as exc:
            raise DivergenceError(f"training diverged at epoch {epoch}: {exc}", epoch=epoch) from None
        sse = value - config.tau * (np.vdot(state.U0, state.U0) + np.vdot(state.S0, state.S0))
        train_rmse = float(np.sqrt(max(sse, 0.0) / len(fit_entries)))
        if val_entries is not None:
            vp = predict_entries(U, S, val_entries.users, val_entries.services, val_entries.slices)
            val_rmse = float(np.sqrt(np.mean((vp - val_entries.values) ** 2)))
            score = val_rmse
        else:
            val_rmse = float("nan")
            score = value
        history.append({"epoch": epoch, "train_loss": value, "train_rmse": train_rmse, "val_rmse": val_rmse})

        if score < state.best_val:
            state = dataclasses.replace(state, best_val=score, best_epoch=epoch)
            best = (state.U0, state.S0)
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                stopped_early = True
                break
        state = adam_step(state, (gU, gS), config.learning_rate)
        state.epoch = epoch

    state = dataclasses.replace(state, U0=best[0], S0=best[1])
    log.debug("fit stopped after %d epochs, best epoch %d", len(history), state.best_epoch)
    return FitResult(state, history, config, theta, adj, fit_entries, val_entries, stopped_early)


def model_from_checkpoint(ckpt: Checkpoint) -> FitResult:
    """Rebuild a predictor (adjacency, mixing matrix, parameters) from a checkpoint."""
    config = TrainConfig.from_dict(ckpt.config)
    U, S, T = ckpt.dims
    edges = np.asarray(ckpt.edges).reshape(-1, 3)
    entries = SparseQosTensor(ckpt.dims, edges[:, 0], edges[:, 1], edges[:, 2], ckpt.edge_values)
    theta = build_mixing_matrix(T, config.K)
    adj = prepare_adjacency(entries, theta, config.adjacency_mode)
    state = TrainState.fresh(ckpt.U0, ckpt.S0)
    state.best_epoch = int((ckpt.extra or {}).get("best_epoch", 0))
    return FitResult(state, [], config, theta, adj, entries)


HISTORY_FIELDS = ("epoch", "trainLoss", "trainRMSE", "valRMSE")


def write_history_csv(history: list[dict], path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["train_rmse"]), repr(h["val_rmse"])])
    os.replace(tmp, path)
