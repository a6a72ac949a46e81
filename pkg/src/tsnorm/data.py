"""Containers and IO for labeled multivariate time series.

The data model is deliberately small: a dense ``(N, d, T)`` float64 array of
N series with d features observed at T timesteps, an integer label per
series, and an optional per-series weight vector.  Everything downstream
(normalization layers, the training stack, the synthetic generator) moves
these batches around without copying.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

BINARY = "binary"
TERNARY = "ternary"

_CLASS_COUNT = {BINARY: 2, TERNARY: 3}


class CsvFormatError(ValueError):
    """A dataset file violates the expected CSV layout."""


@dataclass(frozen=True)
class RngState:
    """Deterministic random-stream handle.

    Streams come from numpy's PCG64 bit generator, which produces the same
    sequence for the same seed on every platform.  Parallel or per-fold work
    derives independent child states with :meth:`child`; a stream is never
    shared between owners.
    """

    seed: int

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))

    def child(self, index: int) -> "RngState":
        # Golden-ratio multiply spreads small indices over 64 bits before the
        # XOR fold so sibling streams stay decorrelated.
        mixed = ((index + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        return RngState(self.seed ^ mixed)


@dataclass(frozen=True, eq=False)
class TimeSeriesBatch:
    """Dense batch of ``n`` series x ``d`` features x ``t`` timesteps.

    Values are validated to be finite float64 and are frozen after
    construction, so a batch can be shared across threads read-only.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(
                f"expected a (series, feature, timestep) array, got shape {v.shape}"
            )
        if v.size and not np.all(np.isfinite(v)):
            raise ValueError("time series batch contains NaN or Inf entries")
        # freeze a private copy; never flips the writeable flag on caller-owned storage
        if v.flags.writeable or not v.flags.c_contiguous:
            v = np.ascontiguousarray(v).copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def t(self) -> int:
        return self.values.shape[2]

    def series(self, i: int) -> np.ndarray:
        """The (d, T) matrix of series ``i``."""
        return self.values[i]

    def feature(self, k: int) -> np.ndarray:
        """All observations of feature ``k`` as an (N, T) matrix."""
        return self.values[:, k, :]

    def pooled(self, k: int) -> np.ndarray:
        """Feature ``k`` pooled over series and timesteps (length N*T)."""
        return self.values[:, k, :].reshape(-1)


@dataclass(eq=False)
class LabeledDataset:
    """A batch plus one integer label per series and optional weights."""

    batch: TimeSeriesBatch
    labels: np.ndarray
    label_kind: str = BINARY
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (self.batch.n,):
            raise ValueError(
                f"labels shape {labels.shape} does not match batch of {self.batch.n} series"
            )
        if self.label_kind not in _CLASS_COUNT:
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        n_classes = _CLASS_COUNT[self.label_kind]
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"labels out of range for {self.label_kind} task")
        self.labels = labels
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.batch.n,):
                raise ValueError("weights length does not match series count")
            if np.any(w < 0):
                raise ValueError("weights must be nonnegative")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("weights must sum to 1")
            self.weights = w

    @property
    def n(self) -> int:
        return self.batch.n

    @property
    def n_classes(self) -> int:
        return _CLASS_COUNT[self.label_kind]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        """Row subset; weights are renormalized to keep the sum-to-one invariant."""
        indices = np.asarray(indices, dtype=np.int64)
        w = None
        if self.weights is not None:
            w = self.weights[indices]
            total = w.sum()
            w = w / total if total > 0 else np.full(len(indices), 1.0 / max(len(indices), 1))
        return LabeledDataset(
            TimeSeriesBatch(self.batch.values[indices]),
            self.labels[indices],
            self.label_kind,
            w,
        )


def _parse_header(header: list[str]) -> int:
    if len(header) < 3 or header[0] != "series_id" or header[1] != "timestep" or header[-1] != "label":
        raise CsvFormatError(
            "header must be series_id,timestep,f1..fd,label; got " + ",".join(header)
        )
    feats = header[2:-1]
    for k, name in enumerate(feats):
        if name != f"f{k + 1}":
            raise CsvFormatError(f"feature columns must be named f1..fd in order; got {name!r}")
    if not feats:
        raise CsvFormatError("dataset must declare at least one feature column")
    return len(feats)


def load_csv(path: str | Path) -> LabeledDataset:
    """Read a dataset from the delimited format written by :func:`save_csv`.

    One row per (series, timestep) pair; series are sorted by id and
    timesteps ascending in the returned batch.  Malformed input (missing
    cells, non-numeric features, ragged series, duplicate pairs,
    inconsistent labels) raises :class:`CsvFormatError` with the offending
    row number.
    """
    path = Path(path)
    per_series: dict[int, dict[int, tuple[np.ndarray, int]]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("empty file") from None
        d = _parse_header([h.strip() for h in header])
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 3:
                raise CsvFormatError(f"row {row_no}: expected {d + 3} cells, got {len(row)}")
            try:
                sid = int(row[0])
                step = int(row[1])
                label = int(row[-1])
            except ValueError as exc:
                raise CsvFormatError(f"row {row_no}: {exc}") from None
            try:
                feats = np.array([float(c) for c in row[2:-1]], dtype=np.float64)
            except ValueError:
                raise CsvFormatError(f"row {row_no}: non-numeric feature value") from None
            if not np.all(np.isfinite(feats)):
                raise CsvFormatError(f"row {row_no}: non-finite feature value")
            steps = per_series.setdefault(sid, {})
            if step in steps:
                raise CsvFormatError(f"row {row_no}: duplicate (series, timestep) pair ({sid}, {step})")
            steps[step] = (feats, label)

    if not per_series:
        raise CsvFormatError("file contains a header but no data rows")

    sids = sorted(per_series)
    step_sets = {sid: tuple(sorted(per_series[sid])) for sid in sids}
    ref_steps = step_sets[sids[0]]
    for sid in sids:
        if step_sets[sid] != ref_steps:
            raise CsvFormatError(
                f"ragged series: series {sid} has timesteps {step_sets[sid]}, "
                f"series {sids[0]} has {ref_steps}"
            )
    t = len(ref_steps)
    values = np.empty((len(sids), d, t), dtype=np.float64)
    labels = np.empty(len(sids), dtype=np.int64)
    for i, sid in enumerate(sids):
        series_labels = set()
        for j, step in enumerate(ref_steps):
            feats, label = per_series[sid][step]
            values[i, :, j] = feats
            series_labels.add(label)
        if len(series_labels) != 1:
            raise CsvFormatError(f"series {sid}: label differs between rows")
        labels[i] = series_labels.pop()

    if labels.min() < 0 or labels.max() > 2:
        raise CsvFormatError("labels must be in {0,1} or {0,1,2}")
    kind = TERNARY if labels.max() > 1 else BINARY
    return LabeledDataset(TimeSeriesBatch(values), labels, kind)


def save_csv(dataset: LabeledDataset, path: str | Path) -> None:
    """Write a dataset in the exact format :func:`load_csv` accepts.

    Feature values use shortest round-trip decimal text, so saving and
    reloading reproduces the 64-bit values bit for bit.
    """
    if dataset.batch.d == 0:
        raise ValueError("refusing to write a dataset with zero feature columns")
    path = Path(path)
    d, t = dataset.batch.d, dataset.batch.t
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "timestep"] + [f"f{k + 1}" for k in range(d)] + ["label"])
        for i in range(dataset.batch.n):
            label = int(dataset.labels[i])
            for step in range(t):
                cells = [repr(float(v)) for v in dataset.batch.values[i, :, step]]
                writer.writerow([i, step] + cells + [label])


def minibatch_indices(
    n: int, batch_size: int, generator: np.random.Generator, shuffle: bool = True
) -> Iterator[np.ndarray]:
    """Yield index arrays covering 0..n-1 exactly once; last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = generator.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def minibatches(
    dataset: LabeledDataset, batch_size: int, rng: RngState, shuffle: bool = True
) -> list[np.ndarray]:
    """One epoch of minibatch index slices, deterministic under a fixed seed."""
    return list(minibatch_indices(dataset.n, batch_size, rng.generator(), shuffle))
