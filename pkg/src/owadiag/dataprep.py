"""Monitoring CSV ingestion, standardisation, sliding windows and CV folds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

CLASSES = ("NonFault", "BR1", "QrQw", "QCaD", "Kla", "O2")
FAULT_CLASSES = CLASSES[1:]
FAULT_COLUMNS = ("fault_class", "fault_onset_index", "fault_magnitude")
SIGMA_FLOOR = 1e-12
DEFAULT_SAMPLING_MINUTES = 15.0


class DataError(ValueError):
    """Base class for malformed monitoring data."""


class SchemaError(DataError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyInputError(DataError):
    pass


def class_id(name: str) -> int:
    low = {c.lower(): i for i, c in enumerate(CLASSES)}
    key = name.strip().lower().replace("_", "")
    if key not in low:
        raise ValueError(f"unknown class {name!r}; expected one of {CLASSES}")
    return low[key]


@dataclass(frozen=True)
class FaultAnnotation:
    fault_class: str
    onset: int
    magnitude: str = ""

    @property
    def label(self) -> int:
        return class_id(self.fault_class)


@dataclass
class MonitoringSeries:
    run_id: str
    variables: tuple[str, ...]
    samples: np.ndarray  # [T, V]
    sampling_minutes: float = DEFAULT_SAMPLING_MINUTES
    timestamps: tuple[str, ...] | None = None
    fault: FaultAnnotation | None = None
    standardized_with: "StandardizationStats | None" = field(default=None, repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a T x V matrix")
        T, V = self.samples.shape
        if T < 1 or V < 1:
            raise EmptyInputError(f"series {self.run_id!r} has shape {self.samples.shape}")
        if len(self.variables) != V:
            raise ValueError(f"{len(self.variables)} variable names for {V} columns")
        if self.timestamps is None:
            self.timestamps = tuple(str(i) for i in range(T))
        elif len(self.timestamps) != T:
            raise ValueError("one timestamp per sample required")
        if self.fault is not None and not 0 <= self.fault.onset < T:
            raise ValueError(f"fault onset {self.fault.onset} outside [0, {T})")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_variables(self) -> int:
        return self.samples.shape[1]


# ---------------------------------------------------------------------------
# CSV I/O


def _parse_timestamps(raw, path):
    try:
        idx = [int(t) for t in raw]
    except ValueError:
        idx = None
    if idx is not None:
        for r, (a, b) in enumerate(zip(idx[:-1], idx[1:]), start=2):
            if b - a != 1:
                raise ParseError(f"{path}: sample index not consecutive at row {r + 1}", row=r + 1, column="timestamp")
        return None
    stamps = []
    for r, t in enumerate(raw, start=2):
        try:
            stamps.append(datetime.fromisoformat(t))
        except ValueError:
            raise ParseError(f"{path}: bad timestamp {t!r} at row {r}", row=r, column="timestamp") from None
    if len(stamps) == 1:
        return None
    steps = {(b - a).total_seconds() for a, b in zip(stamps[:-1], stamps[1:])}
    if len(steps) != 1 or min(steps) <= 0:
        raise ParseError(f"{path}: timestamps are not strictly increasing at a fixed period", column="timestamp")
    return steps.pop() / 60.0


def _fill_missing(x):
    # forward-fill within the run, then fall back to the column mean
    for j in range(x.shape[1]):
        col = x[:, j]
        miss = np.isnan(col)
        if not miss.any():
            continue
        last = np.nan
        for i in range(col.shape[0]):
            if miss[i]:
                col[i] = last
            else:
                last = col[i]
        still = np.isnan(col)
        if still.any():
            col[still] = np.nanmean(col)
    return x


def load_series(path, sampling_minutes: float = DEFAULT_SAMPLING_MINUTES, run_id: str | None = None) -> MonitoringSeries:
    """Parse one monitoring CSV.  Empty cells count as missing; any other
    non-numeric or non-finite cell is a :class:`ParseError`."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(c.strip() for c in rows[0]):
        raise EmptyInputError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    if header[0] != "timestamp":
        raise SchemaError(f"{path}: first column must be 'timestamp', got {header[0]!r}", column=header[0])
    if len(set(header)) != len(header):
        dup = next(h for h in header if header.count(h) > 1)
        raise SchemaError(f"{path}: duplicate column {dup!r}", column=dup)
    present = [c for c in FAULT_COLUMNS if c in header]
    if present:
        tail = tuple(header[-3:])
        if tail != FAULT_COLUMNS:
            missing = [c for c in FAULT_COLUMNS if c not in header]
            col = missing[0] if missing else present[0]
            raise SchemaError(f"{path}: fault columns must be the last three {FAULT_COLUMNS}; problem with {col!r}", column=col)
        var_names = header[1:-3]
    else:
        var_names = header[1:]
    if not var_names:
        raise SchemaError(f"{path}: no variable columns", column=None)
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    if not body:
        raise EmptyInputError(f"{path}: header only, no samples")

    T, V = len(body), len(var_names)
    x = np.empty((T, V))
    for i, r in enumerate(body):
        row_no = i + 2  # 1-based file line, header is line 1
        if len(r) != len(header):
            raise SchemaError(f"{path}: row {row_no} has {len(r)} cells, header has {len(header)}",
                              column=None if len(r) < len(header) else f"#{len(header) + 1}")
        for j, cell in enumerate(r[1 : 1 + V]):
            s = cell.strip()
            if s == "":
                x[i, j] = np.nan
                continue
            try:
                v = float(s)
            except ValueError:
                v = math.nan
                bad = True
            else:
                bad = not math.isfinite(v)
            if bad:
                raise ParseError(f"{path}: non-numeric value {cell!r} at row {row_no}, column {var_names[j]!r}",
                                 row=row_no, column=var_names[j])
            x[i, j] = v
    if np.isnan(x).all(axis=0).any():
        j = int(np.flatnonzero(np.isnan(x).all(axis=0))[0])
        raise ParseError(f"{path}: column {var_names[j]!r} has no values", column=var_names[j])
    x = _fill_missing(x)

    raw_ts = tuple(r[0].strip() for r in body)
    period = _parse_timestamps(raw_ts, path)
    fault = None
    if present:
        vals = {tuple(c.strip() for c in r[-3:]) for r in body}
        if len(vals) != 1:
            raise SchemaError(f"{path}: fault columns must be constant within a run", column="fault_class")
        cls, onset, mag = vals.pop()
        if cls and cls.lower() != "nonfault":
            try:
                class_id(cls)
                onset_i = int(onset)
            except ValueError as e:
                raise ParseError(f"{path}: bad fault annotation: {e}", column="fault_class") from None
            if not 0 <= onset_i < T:
                raise ParseError(f"{path}: fault onset {onset_i} outside [0, {T})", column="fault_onset_index")
            fault = FaultAnnotation(CLASSES[class_id(cls)], onset_i, mag)
    return MonitoringSeries(
        run_id=run_id or path.stem,
        variables=tuple(var_names),
        samples=x,
        sampling_minutes=period if period is not None else sampling_minutes,
        timestamps=raw_ts,
        fault=fault,
    )


def write_series(path, series: MonitoringSeries, annotate: bool = True) -> Path:
    path = Path(path)
    header = ["timestamp", *series.variables]
    if annotate:
        header += list(FAULT_COLUMNS)
        f = series.fault
        tail = [f.fault_class, str(f.onset), f.magnitude] if f else ["NonFault", "", ""]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for ts, row in zip(series.timestamps, series.samples):
            cells = [ts, *(repr(float(v)) for v in row)]
            w.writerow(cells + tail if annotate else cells)
    return path


# ---------------------------------------------------------------------------
# standardisation


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: frozenset = frozenset()

    @property
    def degenerate(self) -> np.ndarray:
        return self.std < SIGMA_FLOOR

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, mean=self.mean, std=self.std, fitted_on=np.array(sorted(self.fitted_on), dtype=str))
        return path

    @classmethod
    def load(cls, path) -> "StandardizationStats":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"stats file not found: {path}")
        with np.load(path, allow_pickle=False) as z:
            return cls(z["mean"], z["std"], frozenset(z["fitted_on"].tolist()))


def fit_stats(series_list) -> StandardizationStats:
    """Per-variable mean and (sample) standard deviation over the given runs."""
    series_list = list(series_list)
    if not series_list:
        raise ValueError("fit_stats needs at least one series")
    x = np.concatenate([s.samples for s in series_list])
    mean = x.mean(axis=0)
    std = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
    return StandardizationStats(mean, std, frozenset(s.run_id for s in series_list))


def apply_stats(series: MonitoringSeries, stats: StandardizationStats) -> MonitoringSeries:
    if stats.mean.shape[0] != series.n_variables:
        raise ValueError(f"stats cover {stats.mean.shape[0]} variables, series has {series.n_variables}")
    safe = np.where(stats.degenerate, 1.0, stats.std)
    z = (series.samples - stats.mean) / safe
    z[:, stats.degenerate] = 0.0
    return replace(series, samples=z, standardized_with=stats)


def destandardize(series: MonitoringSeries, stats: StandardizationStats) -> MonitoringSeries:
    x = series.samples * np.where(stats.degenerate, 0.0, stats.std) + stats.mean
    return replace(series, samples=x, standardized_with=None)


# ---------------------------------------------------------------------------
# sliding windows


@dataclass(frozen=True)
class LabelledWindow:
    data: np.ndarray  # [V, S]
    label: int
    end_timestamp: str
    run_id: str = ""
    start: int = 0


def window_count(T: int, size: int, step: int) -> int:
    return (T - size) // step + 1 if T >= size else 0


def window_labels(T: int, size: int, step: int, onset: int | None, fault_label: int = 0) -> np.ndarray:
    """Faulty iff the window holds at least one sample at or after ``onset``."""
    ends = np.arange(window_count(T, size, step)) * step + size - 1
    if onset is None:
        return np.zeros(ends.shape[0], dtype=np.int64)
    return np.where(ends >= onset, fault_label, 0).astype(np.int64)


def _check_window_args(T, size, step):
    if size < 1 or step < 1:
        raise ValueError(f"window size and step must be >= 1, got size={size}, step={step}")
    if T < size:
        raise ValueError(f"series has {T} samples, fewer than window size {size}")


def window_arrays(series: MonitoringSeries, size: int, step: int):
    """Stacked windows ``X`` [N, V, S], labels ``y`` [N] and end indices [N]."""
    T = series.n_samples
    _check_window_args(T, size, step)
    n = window_count(T, size, step)
    starts = np.arange(n) * step
    view = np.lib.stride_tricks.sliding_window_view(series.samples, size, axis=0)  # [T-S+1, V, S]
    X = np.ascontiguousarray(view[starts])
    f = series.fault
    y = window_labels(T, size, step, f.onset if f else None, f.label if f else 0)
    return X, y, starts + size - 1


def slide_windows(series: MonitoringSeries, size: int, step: int) -> list[LabelledWindow]:
    X, y, ends = window_arrays(series, size, step)
    return [
        LabelledWindow(X[i], int(y[i]), series.timestamps[e], series.run_id, int(e - size + 1))
        for i, e in enumerate(ends)
    ]


# ---------------------------------------------------------------------------
# run registry and cross-validation


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    fault_class: str = "NonFault"
    combo: int = -1
    run_index: int = 0
    path: str = ""
    onset: int | None = None
    magnitude: float | None = None


MANIFEST_FIELDS = ("run_id", "path", "fault_class", "combo", "run_index", "onset", "magnitude")


def write_manifest(path, records) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([r.run_id, r.path, r.fault_class, r.combo, r.run_index,
                        "" if r.onset is None else r.onset,
                        "" if r.magnitude is None else repr(float(r.magnitude))])
    return path


def load_manifest(path) -> list[RunRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    missing = [c for c in MANIFEST_FIELDS if rows and c not in rows[0]]
    if missing:
        raise SchemaError(f"{path}: manifest lacks column {missing[0]!r}", column=missing[0])
    return [
        RunRecord(
            run_id=r["run_id"], path=r["path"], fault_class=r["fault_class"], combo=int(r["combo"]),
            run_index=int(r["run_index"]), onset=int(r["onset"]) if r["onset"] else None,
            magnitude=float(r["magnitude"]) if r["magnitude"] else None,
        )
        for r in rows
    ]


@dataclass(frozen=True)
class CvPartition:
    folds: tuple[tuple[str, ...], ...]
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_ids(self, fold: int) -> tuple[str, ...]:
        return self.folds[fold]

    def train_ids(self, fold: int) -> tuple[str, ...]:
        return tuple(r for i, f in enumerate(self.folds) if i != fold for r in f)


def cv_partition(records, k: int = 5, seed: int = 0) -> CvPartition:
    """Stratified k-fold split of whole runs.

    Each (class, time/magnitude combination) group is ordered by run index and
    cut into ``len(group) // k`` consecutive runs per fold; leftovers are dealt
    round-robin over a seed-shuffled fold order.
    """
    records = list(records)
    if not records:
        raise ValueError("cv_partition needs a non-empty run registry")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    ids = [r.run_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate run ids in registry")
    groups: dict[tuple[str, int], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.fault_class, r.combo), []).append(r)
    order = np.random.default_rng(seed).permutation(k)
    folds: list[list[str]] = [[] for _ in range(k)]
    deal = 0
    for key in sorted(groups, key=lambda g: (class_id(g[0]), g[1])):
        runs = sorted(groups[key], key=lambda r: (r.run_index, r.run_id))
        nruns = len(runs) // k
        for f in range(k):
            folds[f].extend(r.run_id for r in runs[f * nruns : (f + 1) * nruns])
        for r in runs[k * nruns :]:
            folds[int(order[deal % k])].append(r.run_id)
            deal += 1
    return CvPartition(tuple(tuple(f) for f in folds), seed)
