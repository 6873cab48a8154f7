"""Held-out metrics, hyperparameter sweeps and ablation variants."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DataError, DatasetSplit, SparseQosTensor
from .model import Checkpoint
from .train import FitResult, TrainConfig, fit, model_from_checkpoint

log = logging.getLogger(__name__)

SWEEP_AXES = ("L", "K")
ABLATION_VARIANTS = ("SCG", "SCG-w/o-T", "SCG-w/o-S&T")


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mae: float
    entry_count: int
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def __post_init__(self):
        # rmse >= mae holds exactly in real arithmetic; allow one rounding step
        if not (self.mae >= 0 and self.rmse >= self.mae * (1 - 1e-12)):
            raise ValueError(f"inconsistent metrics: rmse={self.rmse}, mae={self.mae}")

    def to_json(self) -> dict:
        """Deterministic content only; wall time is left out so reruns compare equal."""
        return {"rmse": self.rmse, "mae": self.mae, "entry_count": self.entry_count, "config": self.config}


def metrics(predictions: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    a = np.abs(np.asarray(predictions, dtype=np.float64) - np.asarray(truth, dtype=np.float64))
    peak = a.max() if a.size else 0.0
    if peak == 0.0:
        return 0.0, 0.0
    # scale by the largest residual so tiny residuals do not underflow when squared
    return float(peak * np.sqrt(np.mean((a / peak) ** 2))), float(np.mean(a))


def evaluate(model: FitResult | Checkpoint, test: SparseQosTensor) -> MetricsReport:
    """RMSE and MAE of ``model`` over the observed entries of ``test``."""
    t0 = time.perf_counter()
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)
    dims = model.fit_entries.dims
    if tuple(test.dims) != tuple(dims):
        raise DataError(f"dimension mismatch: model trained on {dims}, test tensor has {test.dims}")
    if len(test) == 0:
        raise DataError("test set is empty")
    rmse, mae = metrics(model.predict(test), test.values)
    return MetricsReport(rmse, mae, len(test), model.config.to_dict(), time.perf_counter() - t0)


def run_once(config: TrainConfig, split: DatasetSplit) -> MetricsReport:
    t0 = time.perf_counter()
    result = fit(config, split)
    report = evaluate(result, split.test)
    return dataclasses.replace(report, wall_time=time.perf_counter() - t0)


def write_json(obj, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


# -- sweeps -------------------------------------------------------------------


@dataclass
class SweepRow:
    value: int
    seed: int
    report: MetricsReport | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class SweepResult:
    axis: str
    values: list[int]
    seeds: list[int]
    rows: list[SweepRow]

    @property
    def failures(self) -> int:
        return sum(not r.ok for r in self.rows)

    def summary(self) -> dict[int, dict]:
        """Mean and standard deviation of RMSE/MAE per axis value over successful seeds."""
        out = {}
        for v in sorted(set(self.values)):
            ok = sorted((r for r in self.rows if r.value == v and r.ok), key=lambda r: r.seed)
            if not ok:
                out[v] = {"runs": 0}
                continue
            rm = np.array([r.report.rmse for r in ok])
            ma = np.array([r.report.mae for r in ok])
            out[v] = {
                "runs": len(ok),
                "rmse_mean": float(rm.mean()),
                "rmse_std": float(rm.std()),
                "mae_mean": float(ma.mean()),
                "mae_std": float(ma.std()),
            }
        return out

    def write_csv(self, path: str | os.PathLike) -> None:
        """Columns: axis value, seed, status, rmse, mae, entries; sorted by (value, seed)."""
        _write_rows(
            path,
            [self.axis, "seed", "status", "rmse", "mae", "entries"],
            [
                [r.value, r.seed, "ok", repr(r.report.rmse), repr(r.report.mae), r.report.entry_count]
                if r.ok
                else [r.value, r.seed, "failed", "", "", ""]
                for r in sorted(self.rows, key=lambda r: (r.value, r.seed))
            ],
        )


def _write_rows(path, header, rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


SplitSource = DatasetSplit | Callable[[int], DatasetSplit]


def _split_for(split: SplitSource, seed: int) -> DatasetSplit:
    return split(seed) if callable(split) else split


def _sweep_job(args) -> SweepRow:
    axis, config, value, seed, split = args
    try:
        return SweepRow(value, seed, run_once(config, split))
    except Exception as exc:  # recorded per run, never fatal to the sweep
        log.warning("sweep run %s=%s seed=%s failed: %s", axis, value, seed, exc)
        return SweepRow(value, seed, None, f"{type(exc).__name__}: {exc}")


def sweep(
    base: TrainConfig,
    axis: str,
    values: Sequence[int],
    seeds: Sequence[int],
    split: SplitSource,
    jobs: int = 1,
) -> SweepResult:
    """Train one model per (axis value, seed) and collect held-out metrics.

    ``split`` is either one shared split or a function mapping a seed to its
    split.  Each run's config is ``base`` with the axis value and seed
    substituted.  Failures are recorded as rows without a report.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = sorted(int(v) for v in values)
    seeds = [int(s) for s in seeds]
    tasks = [
        (axis, dataclasses.replace(base, **{axis: v, "seed": s}), v, s, _split_for(split, s))
        for v in values
        for s in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_job, tasks))
    else:
        rows = [_sweep_job(t) for t in tasks]
    rows.sort(key=lambda r: (r.value, r.seed))
    return SweepResult(axis, values, seeds, rows)


# -- ablation -----------------------------------------------------------------


def ablation_configs(base: TrainConfig) -> dict[str, TrainConfig]:
    """The full model, the model without temporal mixing (K=0), and plain
    per-slice factorization without propagation (L=0)."""
    return {
        "SCG": base,
        "SCG-w/o-T": dataclasses.replace(base, K=0),
        "SCG-w/o-S&T": dataclasses.replace(base, L=0),
    }


def ablate(base: TrainConfig, split: DatasetSplit) -> dict[str, MetricsReport]:
    return {name: run_once(cfg, split) for name, cfg in ablation_configs(base).items()}


def write_ablation_csv(by_seed: dict[int, dict[str, MetricsReport]], path: str | os.PathLike) -> None:
    """One row per (seed, variant): variant, L, K, seed, rmse, mae, entries."""
    rows = []
    for seed in sorted(by_seed):
        for name in ABLATION_VARIANTS:
            rep = by_seed[seed].get(name)
            if rep is not None:
                rows.append([name, rep.config["L"], rep.config["K"], seed, repr(rep.rmse), repr(rep.mae), rep.entry_count])
    _write_rows(path, ["variant", "L", "K", "seed", "rmse", "mae", "entries"], rows)
