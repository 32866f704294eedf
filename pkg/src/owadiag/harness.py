"""Training, evaluation, hyperparameter grid and online diagnosis."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import dataprep
from .dataprep import CLASSES, CvPartition, MonitoringSeries, StandardizationStats
from .layouts import ModelLayout, build_layout
from .nn import SGD, Network, softmax, softmax_cross_entropy
from .quantifiers import Quantifier, parse_quantifier

log = logging.getLogger(__name__)

LEARNING_RATES = (0.1, 0.01, 0.001)
BATCH_SIZES = (32, 50, 64, 128, 256)
EPOCHS = (200, 500, 700)
N_CLASSES = len(CLASSES)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class LeakageError(RuntimeError):
    """Test windows were standardised with statistics fitted on test runs."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 200
    momentum: float = 0.9
    seed: int = 0
    layout: str = "model7"
    quantifier: Quantifier = Quantifier("Most")
    grid_mode: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.grid_mode:
            for name, value, allowed in (("lr", self.lr, LEARNING_RATES),
                                         ("batch_size", self.batch_size, BATCH_SIZES),
                                         ("epochs", self.epochs, EPOCHS)):
                if value not in allowed:
                    raise ValueError(f"{name}={value} not in grid {allowed}")


# ---------------------------------------------------------------------------
# data assembly


@dataclass
class FoldData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    stats: StandardizationStats
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def stack_windows(series_list, size: int, step: int):
    """Windows of several runs as network input [N, 1, V, S] plus labels."""
    xs, ys = [], []
    for s in series_list:
        X, y, _ = dataprep.window_arrays(s, size, step)
        xs.append(X)
        ys.append(y)
    if not xs:
        return np.zeros((0, 1, 0, size)), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs)[:, None], np.concatenate(ys)


def guard_leakage(series_list, stats: StandardizationStats):
    for s in series_list:
        if s.standardized_with is not stats:
            raise LeakageError(f"run {s.run_id} was not standardised with the supplied training stats")
        if s.run_id in stats.fitted_on:
            raise LeakageError(f"run {s.run_id} contributed to the standardisation statistics")


def prepare_fold(series: dict[str, MonitoringSeries], partition: CvPartition, fold: int,
                 size: int, step: int) -> FoldData:
    train_ids = partition.train_ids(fold)
    test_ids = partition.test_ids(fold)
    stats = dataprep.fit_stats(series[r] for r in train_ids)
    train = [dataprep.apply_stats(series[r], stats) for r in train_ids]
    test = [dataprep.apply_stats(series[r], stats) for r in test_ids]
    guard_leakage(test, stats)
    X_tr, y_tr = stack_windows(train, size, step)
    X_te, y_te = stack_windows(test, size, step)
    return FoldData(X_tr, y_tr, X_te, y_te, stats, train_ids, test_ids)


def load_corpus(root) -> tuple[list[dataprep.RunRecord], dict[str, MonitoringSeries]]:
    root = Path(root)
    records = dataprep.load_manifest(root)
    series = {r.run_id: dataprep.load_series(root / r.path, run_id=r.run_id) for r in records}
    return records, series


# ---------------------------------------------------------------------------
# training


def train(layout: ModelLayout, X: np.ndarray, y: np.ndarray, config: TrainConfig,
          checkpoints: Iterable[int] = (), on_checkpoint=None) -> tuple[Network, list[float]]:
    """Mini-batch momentum SGD over shuffled windows.

    ``on_checkpoint(epoch, net)`` fires after each epoch listed in
    ``checkpoints``.  Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(X) != len(y):
        raise ValueError("X and y differ in length")
    if y.size and (y.min() < 0 or y.max() >= layout.classes):
        raise ValueError(f"labels must lie in [0, {layout.classes})")
    net = layout.build(seed=config.seed)
    opt = SGD(net.parameters(), config.lr, config.momentum)
    rng = np.random.default_rng([config.seed, 0x5348])
    marks = set(checkpoints)
    history: list[float] = []
    N = len(X)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(N)
        total = 0.0
        for start in range(0, N, config.batch_size):
            idx = order[start : start + config.batch_size]
            logits = net.forward(X[idx])
            loss, grad = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            net.backward(grad)
            opt.step(net.gradients())
            total += loss * len(idx)
        mean_loss = total / N if N else 0.0
        if not np.isfinite(mean_loss) or not all(np.isfinite(p).all() for p in net.parameters()):
            raise TrainingDiverged(epoch, mean_loss)
        history.append(mean_loss)
        if epoch in marks and on_checkpoint is not None:
            on_checkpoint(epoch, net)
    return net, history


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    confusion: np.ndarray  # rows = truth, columns = prediction
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    present: np.ndarray  # classes seen in truth or prediction
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "present": self.present.tolist(),
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(
            np.array(d["confusion"], dtype=np.int64), d["accuracy"], np.array(d["precision"]),
            np.array(d["recall"]), np.array(d["f1"]), np.array(d["present"], dtype=bool),
            d["macro_precision"], d["macro_recall"], d["macro_f1"],
        )


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=den > 0)


def metrics_from_confusion(cm) -> Metrics:
    """Accuracy, per-class and macro precision/recall/F1.

    Undefined ratios are 0; classes absent from both truth and prediction are
    left out of the macro means.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)
    total = cm.sum()
    precision = _ratio(tp, col)
    recall = _ratio(tp, row)
    f1 = _ratio(2 * precision * recall, precision + recall)
    present = (row > 0) | (col > 0)
    if present.any():
        mp, mr, mf = (float(v[present].mean()) for v in (precision, recall, f1))
    else:
        mp = mr = mf = 0.0
    acc = float(tp.sum() / total) if total else 0.0
    return Metrics(cm, acc, precision, recall, f1, present, mp, mr, mf)


def predict(net: Network, X: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    proba = net.predict_proba(X, batch_size)
    return proba.argmax(axis=1), proba


def evaluate(net: Network, X: np.ndarray, y, n_classes: int = N_CLASSES) -> Metrics:
    pred, _ = predict(net, X)
    return metrics_from_confusion(confusion_matrix(y, pred, n_classes))


# ---------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class GridSpec:
    layouts: tuple[str, ...] = ("model7",)
    quantifiers: tuple[Quantifier, ...] = (Quantifier("Most"),)
    learning_rates: tuple[float, ...] = LEARNING_RATES
    batch_sizes: tuple[int, ...] = BATCH_SIZES
    epochs: tuple[int, ...] = EPOCHS
    momentum: float = 0.9
    seed: int = 0
    window: int = 4
    step: int = 1


def config_id(layout: str, q: Quantifier, lr: float, batch: int, epochs: int) -> str:
    return f"{layout}|{q.label}|lr={lr:g}|bs={batch}|ep={epochs}"


@dataclass
class CellResult:
    config_id: str
    layout: str
    quantifier: str
    lr: float
    batch_size: int
    epochs: int
    fold: int
    metrics: Metrics | None = None
    error: str | None = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.metrics is not None

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "metrics"}
        d["metrics"] = self.metrics.to_dict() if self.metrics else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        d = dict(d)
        m = d.pop("metrics")
        return cls(**d, metrics=Metrics.from_dict(m) if m else None)


@dataclass
class GridResult:
    cells: list[CellResult]
    config_order: list[str] = field(default_factory=list)

    def summary(self) -> list[dict]:
        """Fold-averaged metrics per configuration, in grid order."""
        by_cfg: dict[str, list[CellResult]] = {}
        for c in self.cells:
            by_cfg.setdefault(c.config_id, []).append(c)
        order = self.config_order or list(by_cfg)
        rows = []
        for cid in order:
            cells = sorted(by_cfg.get(cid, []), key=lambda c: c.fold)
            if not cells:
                continue
            ok = [c for c in cells if c.ok]
            first = cells[0]
            row = {
                "config_id": cid,
                "layout": first.layout,
                "quantifier": first.quantifier,
                "lr": first.lr,
                "batch_size": first.batch_size,
                "epochs": first.epochs,
                "folds": len(cells),
                "folds_ok": len(ok),
            }
            for key in ("accuracy", "macro_precision", "macro_recall", "macro_f1"):
                row[key] = float(np.mean([getattr(c.metrics, key) for c in ok])) if ok else float("nan")
            rows.append(row)
        return rows


def _unit_key(layout, q, lr, batch, fold):
    return f"{layout}__{q.label}__lr{lr:g}__bs{batch}__f{fold}".replace("(", "_").replace(")", "")


_WORKER_DATA: dict = {}


def _fold_data(source, fold, size, step, partition) -> FoldData:
    key = (id(source) if not isinstance(source, (str, Path)) else str(source), fold, size, step, partition)
    if key not in _WORKER_DATA:
        if isinstance(source, (str, Path)):
            _, series = load_corpus(source)
        else:
            series = source
        _WORKER_DATA.clear()
        _WORKER_DATA[key] = prepare_fold(series, partition, fold, size, step)
    return _WORKER_DATA[key]


def _run_unit(args) -> list[dict]:
    source, partition, spec, layout_name, q, lr, batch, fold, out_dir, save_models = args
    data = _fold_data(source, fold, spec.window, spec.step, partition)
    V = data.X_train.shape[2]
    layout = build_layout(layout_name, q, V, spec.window, N_CLASSES)
    cfg = TrainConfig(lr=lr, batch_size=batch, epochs=max(spec.epochs), momentum=spec.momentum,
                      seed=spec.seed, layout=layout_name, quantifier=q)
    cells: dict[int, CellResult] = {}
    t0 = time.perf_counter()

    def checkpoint(epoch, net):
        m = evaluate(net, data.X_test, data.y_test)
        cells[epoch] = CellResult(config_id(layout_name, q, lr, batch, epoch), layout_name, q.label, lr, batch,
                                  epoch, fold, m, None, time.perf_counter() - t0)
        if save_models and out_dir is not None:
            from .nn import save_checkpoint

            save_checkpoint(Path(out_dir) / "checkpoints" / f"{_unit_key(layout_name, q, lr, batch, fold)}__ep{epoch}.npz",
                            net, layout.to_dict(), {"fold": fold, "epoch": epoch})

    try:
        train(layout, data.X_train, data.y_train, cfg, checkpoints=spec.epochs, on_checkpoint=checkpoint)
    except TrainingDiverged as exc:
        log.warning("cell %s fold %d diverged: %s", layout_name, fold, exc)
        for ep in spec.epochs:
            if ep not in cells:
                cells[ep] = CellResult(config_id(layout_name, q, lr, batch, ep), layout_name, q.label, lr, batch,
                                       ep, fold, None, str(exc), time.perf_counter() - t0)
    return [cells[ep].to_dict() for ep in sorted(cells)]


def run_grid(spec: GridSpec, partition: CvPartition, source, out_dir=None, folds=None,
             jobs: int = 1, max_units: int | None = None, save_models: bool = False) -> GridResult:
    """Train/evaluate every (layout, quantifier, lr, batch, fold) unit.

    Each unit trains once to ``max(spec.epochs)`` and is scored at every value
    in ``spec.epochs``; with a fixed seed this equals separate runs per epoch
    budget.  ``source`` is a corpus directory or a ``{run_id: series}`` map.
    When ``out_dir`` is given, finished units are stored under ``cells/`` and
    skipped on the next call, so an interrupted grid resumes where it stopped.
    """
    folds = list(range(partition.k)) if folds is None else list(folds)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "cells").mkdir(parents=True, exist_ok=True)
    units = []
    order = []
    for layout_name in spec.layouts:
        for q in spec.quantifiers:
            for lr in spec.learning_rates:
                for batch in spec.batch_sizes:
                    for ep in sorted(spec.epochs):
                        order.append(config_id(layout_name, q, lr, batch, ep))
                    for fold in folds:
                        units.append((layout_name, q, lr, batch, fold))

    done: dict[tuple, list[dict]] = {}
    todo = []
    for u in units:
        path = out / "cells" / f"{_unit_key(*u)}.json" if out is not None else None
        if path is not None and path.is_file():
            done[u] = json.loads(path.read_text())
        else:
            todo.append(u)
    if max_units is not None:
        todo = todo[:max_units]

    src = str(source) if isinstance(source, (str, Path)) else source
    args = [(src, partition, spec, *u, out, save_models) for u in todo]

    def store(u, cells):
        done[u] = cells
        if out is not None:
            tmp = out / "cells" / f"{_unit_key(*u)}.json.tmp"
            tmp.write_text(json.dumps(cells))
            tmp.replace(out / "cells" / f"{_unit_key(*u)}.json")

    if jobs > 1 and len(args) > 1:
        if not isinstance(src, str):
            raise ValueError("parallel grids need a corpus directory as source")
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for u, cells in zip(todo, ex.map(_run_unit, args)):
                store(u, cells)
    else:
        for u, a in zip(todo, args):
            store(u, _run_unit(a))

    cells = [CellResult.from_dict(d) for u in units if u in done for d in done[u]]
    rank = {cid: i for i, cid in enumerate(order)}
    cells.sort(key=lambda c: (rank[c.config_id], c.fold))
    result = GridResult(cells, order)
    if out is not None:
        write_grid(result, out)
    return result


CELL_FIELDS = ("config_id", "layout", "quantifier", "lr", "batch_size", "epochs", "fold", "status",
               "accuracy", "macro_precision", "macro_recall", "macro_f1", "seconds", "error")
SUMMARY_FIELDS = ("config_id", "layout", "quantifier", "lr", "batch_size", "epochs", "folds", "folds_ok",
                  "accuracy", "macro_precision", "macro_recall", "macro_f1")


def write_grid(result: GridResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CELL_FIELDS)
        for c in result.cells:
            m = c.metrics
            w.writerow([c.config_id, c.layout, c.quantifier, c.lr, c.batch_size, c.epochs, c.fold,
                        "ok" if c.ok else "failed",
                        *(repr(getattr(m, k)) if m else "" for k in ("accuracy", "macro_precision", "macro_recall", "macro_f1")),
                        f"{c.seconds:.3f}", c.error or ""])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for r in result.summary():
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in SUMMARY_FIELDS])
    return out


def load_grid(out_dir) -> GridResult:
    """Rebuild a :class:`GridResult` from the ``cells/`` records of a grid directory."""
    out = Path(out_dir)
    files = sorted((out / "cells").glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no grid results under {out}")
    cells = [CellResult.from_dict(d) for f in files for d in json.loads(f.read_text())]
    order = []
    if (out / "summary.csv").is_file():
        with open(out / "summary.csv", newline="") as fh:
            order = [r["config_id"] for r in csv.DictReader(fh)]
    seen = set(order)
    order += [c.config_id for c in cells if c.config_id not in seen and not seen.add(c.config_id)]
    rank = {cid: i for i, cid in enumerate(order)}
    cells.sort(key=lambda c: (rank[c.config_id], c.fold))
    return GridResult(cells, order)


# ---------------------------------------------------------------------------
# model selection and reporting


def select_best(results) -> str:
    """Highest fold-averaged macro F1; ties go to higher macro recall, then
    fewer epochs, then earlier configuration."""
    rows = results.summary() if isinstance(results, GridResult) else list(results)
    rows = [r for r in rows if r.get("folds_ok", 1) == r.get("folds", 1) and np.isfinite(r["macro_f1"])]
    if not rows:
        raise ValueError("select_best needs at least one successful configuration")
    best = min(enumerate(rows), key=lambda ir: (-ir[1]["macro_f1"], -ir[1]["macro_recall"], ir[1]["epochs"], ir[0]))
    return best[1]["config_id"]


def delta_percent(candidate: float, baseline: float) -> Decimal:
    """``100 * (candidate - baseline) / baseline`` rounded half-up to 2 decimals."""
    if baseline == 0:
        raise ValueError("baseline value is zero")
    c, b = Decimal(repr(float(candidate))), Decimal(repr(float(baseline)))
    return (Decimal(100) * (c - b) / b).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


REPORT_METRICS = (("accuracy", "accuracy"), ("precision", "macro_precision"),
                  ("recall", "macro_recall"), ("f1", "macro_f1"))


def pooling_report(results, baseline: str, layout: str | None = None) -> str:
    """CSV comparing each pooling quantifier against ``baseline``.

    For every metric a quantifier's best fold-averaged value over its
    configurations is reported with the epoch budget achieving it (fewest on
    ties) and the percentage change relative to the baseline's best value.
    """
    rows = results.summary() if isinstance(results, GridResult) else list(results)
    rows = [r for r in rows if r.get("folds_ok", 1) > 0]
    if layout is not None:
        rows = [r for r in rows if r["layout"] == layout]
    layouts = {r["layout"] for r in rows}
    if len(layouts) > 1:
        raise ValueError(f"results mix layouts {sorted(layouts)}; pass layout=")
    base_label = parse_quantifier(baseline).label
    quants = list(dict.fromkeys(r["quantifier"] for r in rows))
    if base_label not in quants:
        raise ValueError(f"baseline quantifier {base_label} missing from results")
    if len(quants) < 2:
        raise ValueError("pooling report needs at least one candidate besides the baseline")

    best: dict[str, dict[str, tuple[float, int]]] = {}
    for qlab in quants:
        qrows = [r for r in rows if r["quantifier"] == qlab]
        best[qlab] = {}
        for name, key in REPORT_METRICS:
            top = min(qrows, key=lambda r: (-r[key], r["epochs"]))
            best[qlab][name] = (top[key], top["epochs"])

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["layout", "quantifier"]
    for name, _ in REPORT_METRICS:
        header += [name, f"{name}_delta_pct", f"{name}_epochs"]
    w.writerow(header)
    lay = rows[0]["layout"]
    for qlab in [base_label] + [q for q in quants if q != base_label]:
        line = [lay, qlab]
        for name, _ in REPORT_METRICS:
            value, ep = best[qlab][name]
            delta = "-" if qlab == base_label else f"{delta_percent(value, best[base_label][name][0]):.2f}"
            line += [f"{value:.4f}", delta, ep]
        w.writerow(line)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# online diagnosis


@dataclass(frozen=True)
class DiagnosisEvent:
    timestamp: str
    predicted: int
    probabilities: np.ndarray

    @property
    def class_name(self) -> str:
        return CLASSES[self.predicted]

    def to_csv(self) -> str:
        return ",".join([self.timestamp, self.class_name, *(f"{p:.10g}" for p in self.probabilities)])


@dataclass(frozen=True)
class StreamError:
    row: int
    message: str


def diagnose_stream(net: Network, stats: StandardizationStats, source: Iterable, size: int, step: int,
                    n_variables: int | None = None) -> Iterator[DiagnosisEvent | StreamError]:
    """Diagnose a live sample stream with a sliding window.

    ``source`` yields ``(timestamp, values)`` pairs.  Once ``size`` samples are
    buffered an event is emitted, then again after every ``step`` new samples.
    A malformed row yields a :class:`StreamError` and leaves the buffer as is.
    """
    if size < 1 or step < 1:
        raise ValueError("window size and step must be >= 1")
    V = stats.mean.shape[0] if n_variables is None else n_variables
    safe = np.where(stats.degenerate, 1.0, stats.std)
    buf: deque[np.ndarray] = deque(maxlen=size)
    seen = 0
    for row_no, item in enumerate(source, start=1):
        try:
            ts, values = item
            x = np.asarray(values, dtype=np.float64)
            if x.shape != (V,):
                raise ValueError(f"expected {V} values, got {x.size}")
            if not np.isfinite(x).all():
                raise ValueError("non-finite value")
        except (TypeError, ValueError) as exc:
            yield StreamError(row_no, str(exc))
            continue
        z = (x - stats.mean) / safe
        z[stats.degenerate] = 0.0
        buf.append(z)
        seen += 1
        if seen >= size and (seen - size) % step == 0:
            window = np.stack(buf, axis=1)[None, None]  # [1, 1, V, S]
            proba = softmax(net.forward(window))[0]
            yield DiagnosisEvent(str(ts), int(proba.argmax()), proba)


def csv_sample_source(lines: Iterable[str], n_variables: int | None = None):
    """Parse ``timestamp,v1,...,vV[,fault...]`` text lines into stream items.

    A header line starting with ``timestamp`` is skipped; unparsable rows are
    passed through as ``(timestamp, None)`` so the stream reports them.
    """
    for line in lines:
        line = line.strip()
        if not line or line.startswith("timestamp"):
            continue
        cells = line.split(",")
        ts, rest = cells[0], cells[1:]
        if n_variables is not None and len(rest) == n_variables + len(dataprep.FAULT_COLUMNS):
            rest = rest[:n_variables]
        try:
            yield ts, [float(c) for c in rest]
        except ValueError:
            yield ts, None
