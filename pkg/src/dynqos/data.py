"""Sparse (user, service, slice) QoS tensors: parsing, scaling, splitting, synthesis."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent QoS data."""


@dataclass(frozen=True, eq=False)
class SparseQosTensor:
    """Observed entries of a ``numUsers x numServices x numSlices`` tensor.

    Coordinates are kept as three parallel int64 arrays plus a float64 value
    array; entry order is the order of insertion (files keep their line order).
    """

    dims: tuple[int, int, int]
    users: np.ndarray
    services: np.ndarray
    slices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise DataError(f"tensor dims must be three positive integers, got {self.dims}")
        cols = [np.asarray(a, dtype=np.int64).ravel() for a in (self.users, self.services, self.slices)]
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if not all(c.size == vals.size for c in cols):
            raise DataError("coordinate and value arrays differ in length")
        for c, n, axis in zip(cols, dims, ("user", "service", "slice")):
            if c.size and (c.min() < 0 or c.max() >= n):
                raise DataError(f"{axis} index out of range [0, {n})")
        if not np.all(np.isfinite(vals)):
            raise DataError("non-finite QoS value")
        object.__setattr__(self, "dims", dims)
        for name, arr in zip(("users", "services", "slices", "values"), (*cols, vals)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        keys = self.keys()
        if np.unique(keys).size != keys.size:
            raise DataError("duplicate (user, service, slice) key")

    def __len__(self) -> int:
        return self.values.size

    def keys(self) -> np.ndarray:
        """Linear index of each entry, ``(user * S + service) * T + slice``."""
        _, S, T = self.dims
        return (self.users * S + self.services) * T + self.slices

    def subset(self, idx: np.ndarray) -> "SparseQosTensor":
        return SparseQosTensor(self.dims, self.users[idx], self.services[idx], self.slices[idx], self.values[idx])

    def with_values(self, values: np.ndarray) -> "SparseQosTensor":
        return SparseQosTensor(self.dims, self.users, self.services, self.slices, values)

    def to_dense(self, fill: float = np.nan) -> np.ndarray:
        """Dense array in (slice, user, service) layout with ``fill`` at unobserved cells."""
        U, S, T = self.dims
        out = np.full((T, U, S), fill)
        out[self.slices, self.users, self.services] = self.values
        return out

    def same_entries(self, other: "SparseQosTensor") -> bool:
        if self.dims != other.dims or len(self) != len(other):
            return False
        a, b = np.argsort(self.keys()), np.argsort(other.keys())
        return bool(np.array_equal(self.keys()[a], other.keys()[b]) and np.array_equal(self.values[a], other.values[b]))


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: SparseQosTensor
    test: SparseQosTensor
    seed: int
    train_fraction: float


def load_dataset(path: str | os.PathLike, dims: tuple[int, int, int] | None = None) -> SparseQosTensor:
    """Read a whitespace-separated ``user service slice value`` triples file.

    Lines starting with ``#`` and blank lines are skipped.  An optional first
    data line ``dims U S T`` fixes the tensor dimensions; otherwise each axis
    is sized by its largest index plus one.  An explicit ``dims`` argument
    takes precedence over both.
    """
    users, services, slices, values = [], [], [], []
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if fields[0] == "dims":
                if header is not None or users:
                    raise DataError(f"{path}:{lineno}: 'dims' header must precede all entries")
                try:
                    header = tuple(int(f) for f in fields[1:])
                except ValueError:
                    header = ()
                if len(header) != 3 or min(header) < 1:
                    raise DataError(f"{path}:{lineno}: malformed dims header {line!r}")
                continue
            if len(fields) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields 'user service slice value', got {len(fields)}")
            try:
                u, s, t = (int(f) for f in fields[:3])
                v = float(fields[3])
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse {line!r}") from None
            if min(u, s, t) < 0:
                raise DataError(f"{path}:{lineno}: negative index")
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: non-finite value")
            users.append(u)
            services.append(s)
            slices.append(t)
            values.append(v)
    if not users:
        raise DataError(f"{path}: no entries")
    if dims is None:
        dims = header or (max(users) + 1, max(services) + 1, max(slices) + 1)
    cols = [np.array(c, dtype=np.int64) for c in (users, services, slices)]
    for c, n, axis in zip(cols, dims, ("user", "service", "slice")):
        bad = np.flatnonzero(c >= n)
        if bad.size:
            raise DataError(f"{path}: {axis} index {c[bad[0]]} out of range for dims {tuple(dims)} (entry {bad[0] + 1})")
    keys = (cols[0] * dims[1] + cols[1]) * dims[2] + cols[2]
    _, first, counts = np.unique(keys, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = first[counts > 1][0]
        raise DataError(
            f"{path}: duplicate key ({users[dup]}, {services[dup]}, {slices[dup]})"
        )
    return SparseQosTensor(tuple(dims), *cols, np.array(values))


def save_dataset(tensor: SparseQosTensor, path: str | os.PathLike) -> None:
    """Write ``tensor`` in the triples format with a ``dims`` header.

    Values use ``repr`` formatting so a reload is exact.  The file is written
    to a temporary sibling and renamed into place.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("dims {} {} {}\n".format(*tensor.dims))
        for u, s, t, v in zip(tensor.users, tensor.services, tensor.slices, tensor.values):
            fh.write(f"{u} {s} {t} {float(v)!r}\n")
    os.replace(tmp, path)


def normalize_values(tensor: SparseQosTensor, lo: float = 0.0, hi: float = 10.0) -> SparseQosTensor:
    """Affinely rescale values so the minimum maps to ``lo`` and the maximum to ``hi``.

    A constant tensor maps entirely to ``lo``.
    """
    if len(tensor) == 0:
        raise DataError("cannot normalize an empty tensor")
    vmin, vmax = tensor.values.min(), tensor.values.max()
    if vmax == vmin:
        return tensor.with_values(np.full(len(tensor), float(lo)))
    scaled = lo + (tensor.values - vmin) * ((hi - lo) / (vmax - vmin))
    # pin the endpoints so repeated normalization is a fixed point
    scaled[tensor.values == vmin] = lo
    scaled[tensor.values == vmax] = hi
    return tensor.with_values(np.clip(scaled, min(lo, hi), max(lo, hi)))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(tensor: SparseQosTensor, train_fraction: float, seed: int) -> DatasetSplit:
    """Seeded uniform partition of the observed entries into train and test.

    The train side gets ``round(train_fraction * N)`` entries, clamped so that
    both sides are non-empty.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n = len(tensor)
    if n < 2:
        raise DataError(f"need at least 2 entries to split, got {n}")
    n_train = min(max(round_half_up(train_fraction * n), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return DatasetSplit(tensor.subset(train_idx), tensor.subset(test_idx), int(seed), float(train_fraction))


def generate_synthetic(
    num_users: int,
    num_services: int,
    num_slices: int,
    rank: int,
    temporal_smoothness: float = 0.95,
    noise_std: float = 0.1,
    density: float = 0.3,
    seed: int = 0,
    scale: float = 5.0,
) -> SparseQosTensor:
    """Low-rank dynamic QoS tensor with slowly drifting factors.

    Each user and service factor starts at ``mean + N(0, spread^2)`` with
    ``mean = sqrt(scale / rank)`` and ``spread = 0.3 * mean``, then follows a
    mean-reverting AR(1) walk

        p(t) = mean + rho * (p(t-1) - mean) + sqrt(1 - rho^2) * spread * eps

    with ``rho = temporal_smoothness``, so the marginal spread is the same in
    every slice and ``rho = 1`` freezes the factors.  Values are
    ``<p_u(t), r_s(t)> + N(0, noise_std^2)``, so a typical value is near
    ``scale``.  ``round(density * cells)`` cells are kept, chosen uniformly
    without replacement, and values are clipped to ``[0, 10]``.
    """
    dims = (num_users, num_services, num_slices)
    if any(int(d) != d or d < 1 for d in dims) or int(rank) != rank or rank < 1:
        raise DataError(f"dims and rank must be positive integers, got {dims}, rank={rank}")
    if not 0.0 <= temporal_smoothness <= 1.0:
        raise DataError(f"temporal smoothness must lie in [0, 1], got {temporal_smoothness}")
    if not 0.0 < density <= 1.0:
        raise DataError(f"density must lie in (0, 1], got {density}")
    if noise_std < 0 or scale <= 0:
        raise DataError("noise_std must be >= 0 and scale > 0")

    rng = np.random.default_rng(seed)
    P = _ar_walk(rng, num_users, rank, num_slices, temporal_smoothness, scale)
    R = _ar_walk(rng, num_services, rank, num_slices, temporal_smoothness, scale)
    cells = num_users * num_services * num_slices
    n_keep = min(max(round_half_up(density * cells), 1), cells)
    keep = np.sort(rng.choice(cells, size=n_keep, replace=False))
    # key order (user, service, slice) matches SparseQosTensor.keys()
    u, rest = np.divmod(keep, num_services * num_slices)
    s, t = np.divmod(rest, num_slices)
    truth = np.einsum("nr,nr->n", P[t, u], R[t, s])
    vals = np.clip(truth + noise_std * rng.standard_normal(n_keep), 0.0, 10.0)
    return SparseQosTensor(dims, u, s, t, vals)


def _ar_walk(rng: np.random.Generator, n: int, rank: int, T: int, rho: float, scale: float) -> np.ndarray:
    mean = math.sqrt(scale / rank)
    spread = 0.3 * mean
    out = np.empty((T, n, rank))
    out[0] = mean + spread * rng.standard_normal((n, rank))
    innov = math.sqrt(1.0 - rho * rho) * spread
    for t in range(1, T):
        out[t] = mean + rho * (out[t - 1] - mean) + innov * rng.standard_normal((n, rank))
    return out
