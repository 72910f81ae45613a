"""Hourly frames, CSV interchange, normalisation and sliding windows."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, IngestionError, SchemaError

VARIABLE_CLASSES = ("rain", "tide", "gate", "pump", "water")
PREFIXES = {"RAIN_": "rain", "TIDE_": "tide", "GATE_": "gate", "PUMP_": "pump", "WS_": "water"}
DEFAULT_CLASS_COUNTS = {"rain": 1, "tide": 1, "gate": 3, "pump": 2, "water": 4}
DEFAULT_COLUMNS = ("RAIN_1", "TIDE_S4", "GATE_S26", "GATE_S25B", "GATE_S25A",
                   "PUMP_S26", "PUMP_S25B", "WS_S1", "WS_S26", "WS_S25B", "WS_S25A")
EPOCH = datetime(2010, 1, 1)
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%S"
# Sentinel used by Keras-style masking for unknown future inputs. Kept for
# interchange with tools that expect it; this package never feeds it to a model.
MASK_VALUE = 1e-10

# covariates available for the forecast horizon, per consumer
EVALUATOR_COVARIATES = ("rain", "tide", "gate", "pump")
MANAGER_COVARIATES = ("rain", "tide")


def column_class(name: str) -> str:
    for prefix, cls in PREFIXES.items():
        if name.startswith(prefix):
            return cls
    raise SchemaError(f"unknown column prefix: {name!r}")


def _station(name: str) -> str:
    return name.split("_", 1)[1]


@dataclass(frozen=True)
class TimeSeriesFrame:
    """Gap-free hourly multivariate series.

    ``values`` is (T, F) with columns ordered as ``columns``; ``start`` is the
    timestamp of row 0.
    """

    start: datetime
    columns: tuple[str, ...]
    values: np.ndarray
    expected_counts: dict[str, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[1] != len(self.columns):
            raise SchemaError(f"values shape {vals.shape} does not match {len(self.columns)} columns")
        if not np.isfinite(vals).all():
            row = int(np.argwhere(~np.isfinite(vals))[0, 0])
            raise IngestionError(f"non-finite value at row {row}")
        for c in self.columns:
            column_class(c)
        counts = self.class_counts()
        if self.expected_counts is not None and counts != {k: self.expected_counts.get(k, 0) for k in VARIABLE_CLASSES}:
            raise SchemaError(f"variable-class counts {counts} differ from topology {self.expected_counts}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        return (isinstance(other, TimeSeriesFrame) and self.start == other.start
                and self.columns == other.columns and np.array_equal(self.values, other.values))

    @property
    def timestamps(self) -> list[datetime]:
        return [self.start + timedelta(hours=i) for i in range(len(self))]

    def class_counts(self) -> dict[str, int]:
        counts = {k: 0 for k in VARIABLE_CLASSES}
        for c in self.columns:
            counts[column_class(c)] += 1
        return counts

    def indices(self, classes: Sequence[str]) -> list[int]:
        """Column indices for the given classes, in class order then column order."""
        return [i for cls in classes for i, c in enumerate(self.columns) if column_class(c) == cls]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def stations(self, cls: str) -> list[str]:
        return [_station(self.columns[i]) for i in self.indices([cls])]

    def slice_rows(self, lo: int, hi: int) -> "TimeSeriesFrame":
        return TimeSeriesFrame(self.start + timedelta(hours=lo), self.columns, self.values[lo:hi])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.start.isoformat().encode())
        h.update(",".join(self.columns).encode())
        h.update(np.ascontiguousarray(self.values).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- CSV


def write_csv(frame: TimeSeriesFrame, path: str | Path, scale: dict[str, tuple[float, float]] | None = None) -> None:
    """Write the canonical CSV. ``scale`` maps column -> (MIN, MAX) to emit physical units
    for columns stored as [0, 1] fractions."""
    vals = np.array(frame.values)
    if scale:
        for name, (lo, hi) in scale.items():
            j = frame.columns.index(name)
            vals[:, j] = lo + vals[:, j] * (hi - lo)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("timestamp",) + frame.columns)
        for i, row in enumerate(vals):
            ts = (frame.start + timedelta(hours=i)).strftime(TIMESTAMP_FORMAT)
            w.writerow([ts] + [repr(float(v)) for v in row])


def load_csv(path: str | Path, expected_counts: dict[str, int] | None = DEFAULT_CLASS_COUNTS,
             scale: dict[str, tuple[float, float]] | None = None) -> TimeSeriesFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        if not header or header[0] != "timestamp":
            raise SchemaError(f"{path}: first header column must be 'timestamp'")
        columns = tuple(header[1:])
        for c in columns:
            column_class(c)
        stamps, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise IngestionError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                stamps.append(datetime.fromisoformat(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from exc
    if not stamps:
        raise IngestionError(f"{path}: no data rows")
    one_hour = timedelta(hours=1)
    for i in range(1, len(stamps)):
        if stamps[i] - stamps[i - 1] != one_hour:
            missing = (stamps[i - 1] + one_hour).strftime(TIMESTAMP_FORMAT)
            raise IngestionError(
                f"{path}: missing hour {missing} (data row {i + 1} is {stamps[i].strftime(TIMESTAMP_FORMAT)})")
    vals = np.array(rows, dtype=np.float64)
    if scale:
        for name, (lo, hi) in scale.items():
            j = columns.index(name)
            vals[:, j] = (vals[:, j] - lo) / (hi - lo)
    return TimeSeriesFrame(stamps[0], columns, vals, expected_counts=expected_counts)


# ---------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class Normalizer:
    """Per-column z-score statistics."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, min_std: float = 1e-6) -> "Normalizer":
        values = np.asarray(values, dtype=np.float64)
        std = values.std(axis=0)
        # constant columns keep unit scale instead of exploding
        return cls(values.mean(axis=0), np.where(std < min_std, 1.0, std))

    @classmethod
    def fit_minmax(cls, values: np.ndarray, min_range: float = 1e-6) -> "Normalizer":
        """Scale each column onto [0, 1] over ``values``."""
        values = np.asarray(values, dtype=np.float64)
        lo = values.min(axis=0)
        span = values.max(axis=0) - lo
        return cls(lo, np.where(span < min_range, 1.0, span))

    @classmethod
    def identity(cls, n: int) -> "Normalizer":
        return cls(np.zeros(n), np.ones(n))

    def normalize(self, x: np.ndarray, cols: Sequence[int] | None = None) -> np.ndarray:
        mu, sd = (self.mean, self.std) if cols is None else (self.mean[list(cols)], self.std[list(cols)])
        return (x - mu) / sd

    def denormalize(self, z: np.ndarray, cols: Sequence[int] | None = None) -> np.ndarray:
        mu, sd = (self.mean, self.std) if cols is None else (self.mean[list(cols)], self.std[list(cols)])
        return z * sd + mu

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class Layout:
    """Column indices shared by every window drawn from one frame."""

    covariates: tuple[int, ...]
    targets: tuple[int, ...]
    water: tuple[int, ...]
    controls: tuple[int, ...]


def layout_for(frame: TimeSeriesFrame, mode: str) -> Layout:
    if mode == "evaluator":
        cov, tgt = EVALUATOR_COVARIATES, ("water",)
    elif mode == "manager":
        cov, tgt = MANAGER_COVARIATES, ("gate", "pump")
    else:
        raise ConfigError(f"mode must be 'evaluator' or 'manager', got {mode!r}")
    return Layout(tuple(frame.indices(cov)), tuple(frame.indices(tgt)),
                  tuple(frame.indices(["water"])), tuple(frame.indices(["gate", "pump"])))


@dataclass(frozen=True)
class WindowSample:
    """One instance anchored at row ``anchor`` (the last observed hour).

    past: rows anchor-w+1..anchor, all columns. future_cov: rows anchor+1..anchor+k,
    covariate columns only. target: rows anchor+1..anchor+k, target columns.
    """

    anchor: int
    past: np.ndarray
    future_cov: np.ndarray
    target: np.ndarray

    def past_interval(self) -> tuple[int, int]:
        return self.anchor - self.past.shape[0] + 1, self.anchor

    def target_interval(self) -> tuple[int, int]:
        return self.anchor + 1, self.anchor + self.target.shape[0]


class WindowSet(Sequence[WindowSample]):
    """Stride-1 windows over a frame, materialised lazily.

    Batched accessors return stacked arrays so training never builds
    per-sample objects.
    """

    def __init__(self, values: np.ndarray, anchors: np.ndarray, w: int, k: int, layout: Layout, mode: str):
        self.values = values
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.w, self.k, self.layout, self.mode = w, k, layout, mode

    def __len__(self) -> int:
        return len(self.anchors)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(np.arange(len(self))[i])
        a = int(self.anchors[i])
        v = self.values
        return WindowSample(a, v[a - self.w + 1:a + 1].copy(),
                            v[a + 1:a + 1 + self.k][:, self.layout.covariates].copy(),
                            v[a + 1:a + 1 + self.k][:, self.layout.targets].copy())

    def __iter__(self) -> Iterator[WindowSample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.values, self.anchors[np.asarray(idx, dtype=np.int64)], self.w, self.k, self.layout, self.mode)

    def with_values(self, values: np.ndarray) -> "WindowSet":
        """Same anchors over another array of identical shape (e.g. the normalised frame)."""
        if values.shape != self.values.shape:
            raise ConfigError("replacement values must match the frame shape")
        return WindowSet(values, self.anchors, self.w, self.k, self.layout, self.mode)

    def as_mode(self, mode: str, frame: TimeSeriesFrame) -> "WindowSet":
        return WindowSet(self.values, self.anchors, self.w, self.k, layout_for(frame, mode), mode)

    def _rows(self, idx, offset: int, length: int, cols) -> np.ndarray:
        a = self.anchors[idx]
        rows = a[:, None] + offset + np.arange(length)[None, :]
        block = self.values[rows]
        return block if cols is None else block[..., list(cols)]

    def past_batch(self, idx=None) -> np.ndarray:
        idx = slice(None) if idx is None else idx
        return self._rows(idx, -self.w + 1, self.w, None)

    def future_batch(self, idx=None, cols=None) -> np.ndarray:
        idx = slice(None) if idx is None else idx
        return self._rows(idx, 1, self.k, self.layout.covariates if cols is None else cols)

    def target_batch(self, idx=None) -> np.ndarray:
        idx = slice(None) if idx is None else idx
        return self._rows(idx, 1, self.k, self.layout.targets)

    def last_water(self, idx=None) -> np.ndarray:
        idx = slice(None) if idx is None else idx
        return self.values[self.anchors[idx]][:, list(self.layout.water)]


def make_windows(frame: TimeSeriesFrame, w: int = 72, k: int = 24, mode: str = "evaluator",
                 values: np.ndarray | None = None) -> WindowSet:
    """All stride-1 windows: T - w - k + 1 of them.

    ``values`` optionally substitutes a same-shape array (normalised data) for the frame's own.
    """
    if w < 1 or k < 1:
        raise ConfigError("w and k must be positive")
    T = len(frame)
    if T < w + k:
        raise ConfigError(f"frame has {T} rows; need at least w + k = {w + k}")
    anchors = np.arange(w - 1, T - k)
    vals = frame.values if values is None else np.asarray(values)
    return WindowSet(vals, anchors, w, k, layout_for(frame, mode), mode)


def chronological_split(samples: WindowSet, train_fraction: float = 0.8, purge: int = 0) -> tuple[WindowSet, WindowSet]:
    """First floor(fraction * N) samples train, the rest test.

    ``purge`` drops that many samples from the head of the test side; with
    purge >= k - 1 no training target overlaps a test target interval.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be in (0, 1)")
    n = len(samples)
    n_train = int(np.floor(train_fraction * n))
    idx = np.arange(n)
    return samples.subset(idx[:n_train]), samples.subset(idx[n_train + purge:])


def fit_normalizer(frame: TimeSeriesFrame, train: WindowSet, method: str = "zscore") -> Normalizer:
    """Statistics over the frame rows reachable by training windows only (``zscore`` or ``minmax``)."""
    if len(train) == 0:
        raise ConfigError("cannot fit normalizer on an empty training split")
    fits = {"zscore": Normalizer.fit, "minmax": Normalizer.fit_minmax}
    if method not in fits:
        raise ConfigError(f"unknown normalisation {method!r}; expected one of {sorted(fits)}")
    hi = int(train.anchors.max()) + train.k + 1
    return fits[method](frame.values[:hi])
