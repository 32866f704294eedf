import json
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owadiag import harness
from owadiag.dataprep import CLASSES, FaultAnnotation, MonitoringSeries, cv_partition, fit_stats, apply_stats
from owadiag.harness import (
    GridSpec,
    LeakageError,
    Metrics,
    TrainConfig,
    TrainingDiverged,
    confusion_matrix,
    config_id,
    delta_percent,
    diagnose_stream,
    csv_sample_source,
    guard_leakage,
    load_grid,
    metrics_from_confusion,
    pooling_report,
    run_grid,
    select_best,
    train,
)
from owadiag.layouts import build_layout
from owadiag.quantifiers import Kind, Quantifier
from owadiag.synthplant import PlantConfig, generate_corpus

from oracles import brute_metrics, delta_by_hand

MOST = Quantifier(Kind.MOST)


class TestMetrics:
    def test_binary(self):
        cm = np.array([[8, 2], [2, 8]])
        m = metrics_from_confusion(cm)
        assert m.precision[1] == pytest.approx(0.8) and m.recall[1] == pytest.approx(0.8)
        assert m.f1[1] == pytest.approx(0.8) and m.accuracy == pytest.approx(0.8)

    def test_perfect(self):
        m = metrics_from_confusion(confusion_matrix([0, 1, 2, 5], [0, 1, 2, 5]))
        assert m.accuracy == 1.0 and m.macro_f1 == 1.0

    def test_absent_class_excluded(self):
        # 3 classes, class 2 never appears
        cm = np.array([[3, 1, 0], [1, 3, 0], [0, 0, 0]])
        m = metrics_from_confusion(cm)
        assert m.f1[2] == 0.0 and not m.present[2]
        assert m.macro_f1 == pytest.approx(0.75)

    def test_predicted_only_class_counts(self):
        m = metrics_from_confusion(confusion_matrix([0, 0], [0, 1], 3))
        assert m.present.tolist() == [True, True, False]
        assert m.macro_recall == pytest.approx((0.5 + 0.0) / 2)

    @settings(max_examples=100)
    @given(st.integers(2, 6).flatmap(lambda k: st.tuples(
        st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=200))))
    def test_vs_brute_force(self, case):
        k, pairs = case
        truth, pred = zip(*pairs)
        m = metrics_from_confusion(confusion_matrix(truth, pred, k))
        ref = brute_metrics(truth, pred)
        for c, v in ref["per_class"].items():
            assert m.confusion[c, c] == v["tp"]
            assert m.confusion[:, c].sum() - m.confusion[c, c] == v["fp"]
            assert m.confusion[c].sum() - m.confusion[c, c] == v["fn"]
            assert abs(m.precision[c] - v["precision"]) <= 1e-12
            assert abs(m.recall[c] - v["recall"]) <= 1e-12
            assert abs(m.f1[c] - v["f1"]) <= 1e-12
        for key in ("accuracy",):
            assert abs(getattr(m, key) - ref[key]) <= 1e-12
        assert abs(m.macro_f1 - ref["f1"]) <= 1e-12

    def test_dict_roundtrip(self):
        m = metrics_from_confusion(confusion_matrix([0, 1, 1], [0, 1, 0]))
        back = Metrics.from_dict(json.loads(json.dumps(m.to_dict())))
        np.testing.assert_array_equal(back.confusion, m.confusion)
        assert back.macro_f1 == m.macro_f1


class TestSelection:
    def rows(self, *vals):
        return [dict(config_id=f"c{i}", macro_f1=f, macro_recall=r, epochs=e, folds=5, folds_ok=5)
                for i, (f, r, e) in enumerate(vals)]

    def test_higher_f1(self):
        assert select_best(self.rows((0.90, 0.9, 200), (0.92, 0.9, 200))) == "c1"

    def test_recall_tie_break(self):
        assert select_best(self.rows((0.9, 0.88, 200), (0.9, 0.91, 200))) == "c1"

    def test_epoch_tie_break(self):
        assert select_best(self.rows((0.9, 0.9, 700), (0.9, 0.9, 200))) == "c1"

    def test_full_tie(self):
        assert select_best(self.rows((0.9, 0.9, 200), (0.9, 0.9, 200))) == "c0"

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best([])


PUBLISHED_DELTAS = [(0.84, 0.91, "8.33"), (0.91, 0.93, "2.20"), (0.83, 0.85, "2.41"), (0.84, 0.85, "1.19"),
          (0.84, 0.88, "4.76"), (0.83, 0.89, "7.23"), (0.91, 0.94, "3.30"), (0.84, 0.94, "11.90"),
          (0.83, 0.92, "10.84"), (0.91, 0.92, "1.10"), (0.84, 0.90, "7.14"), (0.84, 0.86, "2.38"),
          (0.83, 0.86, "3.61"), (0.84, 0.87, "3.57"), (0.83, 0.88, "6.02"), (0.91, 0.91, "0.00")]


class TestDelta:
    @pytest.mark.parametrize("b,c,expected", PUBLISHED_DELTAS)
    def test_table_values(self, b, c, expected):
        assert delta_percent(c, b) == Decimal(expected)
        assert delta_by_hand(c, b) == float(expected)

    @given(st.integers(1, 100), st.integers(0, 100))
    def test_matches_integer_oracle(self, b, c):
        assert float(delta_percent(c / 100, b / 100)) == delta_by_hand(c / 100, b / 100)

    def test_zero_baseline(self):
        with pytest.raises(ValueError):
            delta_percent(0.5, 0.0)


def summary_rows():
    rows = []
    for q, acc, f1s in (("ThereExists", 0.9, (0.84, 0.86)), ("Most", 0.92, (0.91, 0.90)), ("Average", 0.91, (0.85, 0.88))):
        for ep, f1 in zip((200, 500), f1s):
            rows.append(dict(config_id=f"model7|{q}|ep={ep}", layout="model7", quantifier=q, epochs=ep,
                             accuracy=acc, macro_precision=0.84, macro_recall=0.83, macro_f1=f1, folds=5, folds_ok=5))
    return rows


class TestReport:
    def test_columns_and_deltas(self):
        lines = pooling_report(summary_rows(), "ThereExists").strip().splitlines()
        header = lines[0].split(",")
        assert header[:5] == ["layout", "quantifier", "accuracy", "accuracy_delta_pct", "accuracy_epochs"]
        body = {l.split(",")[1]: dict(zip(header, l.split(","))) for l in lines[1:]}
        assert list(body) == ["ThereExists", "Most", "Average"]
        assert body["ThereExists"]["f1_delta_pct"] == "-"
        # Most best F1 0.91 at 200 epochs vs baseline best 0.86
        assert body["Most"]["f1"] == "0.9100" and body["Most"]["f1_epochs"] == "200"
        assert body["Most"]["f1_delta_pct"] == f"{delta_percent(0.91, 0.86):.2f}" == "5.81"
        assert body["Average"]["f1_epochs"] == "500"

    def test_missing_baseline(self):
        with pytest.raises(ValueError, match="baseline"):
            pooling_report(summary_rows(), "AtLeastHalf")

    def test_single_quantifier(self):
        rows = [r for r in summary_rows() if r["quantifier"] == "ThereExists"]
        with pytest.raises(ValueError):
            pooling_report(rows, "max")


def tiny_series(n_runs=6, T=10, V=3, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n_runs):
        cls = CLASSES[i % len(CLASSES)]
        fault = None if cls == "NonFault" else FaultAnnotation(cls, 4)
        x = rng.normal(size=(T, V))
        if fault:
            x[4:, i % V] += 3.0
        out[f"run{i}"] = MonitoringSeries(f"run{i}", tuple(f"v{j}" for j in range(V)), x, fault=fault)
    return out


class TestTrain:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.layout = build_layout("lenet5", MOST, 4, 4, 3)
        self.X = rng.normal(size=(20, 1, 4, 4))
        self.y = rng.integers(0, 3, 20)

    def test_zero_epochs_is_init(self):
        net, hist = train(self.layout, self.X, self.y, TrainConfig(epochs=0, seed=3))
        ref = self.layout.build(seed=3)
        assert hist == []
        for a, b in zip(net.parameters(), ref.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=3, batch_size=7, seed=1, lr=0.01)
        a, ha = train(self.layout, self.X, self.y, cfg)
        b, hb = train(self.layout, self.X, self.y, cfg)
        assert ha == hb
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_checkpoints_match_separate_runs(self):
        seen = {}
        cfg = TrainConfig(epochs=4, batch_size=8, seed=2, lr=0.01)
        train(self.layout, self.X, self.y, cfg, checkpoints=(2, 4),
              on_checkpoint=lambda ep, net: seen.__setitem__(ep, net.state()))
        short, _ = train(self.layout, self.X, self.y, TrainConfig(epochs=2, batch_size=8, seed=2, lr=0.01))
        for k, v in short.state().items():
            np.testing.assert_array_equal(seen[2][k], v)

    def test_divergence(self):
        X = self.X * 1e200
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged) as e:
            train(self.layout, X, self.y, TrainConfig(epochs=5, lr=0.1))
        assert 1 <= e.value.epoch <= 5

    def test_label_range(self):
        with pytest.raises(ValueError, match="labels"):
            train(self.layout, self.X, np.full(20, 3), TrainConfig(epochs=1))

    def test_grid_mode_validation(self):
        with pytest.raises(ValueError, match="lr"):
            TrainConfig(lr=0.05, grid_mode=True)
        TrainConfig(lr=0.01, batch_size=50, epochs=500, grid_mode=True)

    def test_loss_decreases(self):
        cfg = TrainConfig(epochs=30, batch_size=5, seed=0, lr=0.01)
        _, hist = train(self.layout, self.X, self.y, cfg)
        assert hist[-1] < hist[0] and all(np.isfinite(hist))


class TestLeakage:
    def test_guard(self):
        s = tiny_series()
        stats = fit_stats([s["run0"], s["run1"]])
        ok = apply_stats(s["run2"], stats)
        guard_leakage([ok], stats)
        with pytest.raises(LeakageError):
            guard_leakage([apply_stats(s["run0"], stats)], stats)
        with pytest.raises(LeakageError):
            guard_leakage([s["run2"]], stats)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = PlantConfig(run_length=10)
    generate_corpus(root, cfg, combos=[(4, 3.0)], runs_per_combo=2, nonfault_runs=2, seed=0)
    records, series = harness.load_corpus(root)
    return root, cv_partition(records, k=2, seed=0), series


class TestGrid:
    def spec(self):
        return GridSpec(layouts=("lenet5",), quantifiers=(MOST, Quantifier(Kind.THERE_EXISTS)),
                        learning_rates=(0.01,), batch_sizes=(16,), epochs=(1, 2), window=4, step=2)

    def test_cells_and_resume(self, corpus, tmp_path):
        root, part, series = corpus
        spec = self.spec()
        partial = run_grid(spec, part, root, out_dir=tmp_path / "g", max_units=1)
        assert len(partial.cells) == 2
        full = run_grid(spec, part, root, out_dir=tmp_path / "g")
        fresh = run_grid(spec, part, series)
        # 2 quantifiers x 2 epoch budgets x 2 folds
        assert len(full.cells) == 8
        assert [c.to_dict() | {"seconds": 0} for c in full.cells] == [c.to_dict() | {"seconds": 0} for c in fresh.cells]
        rows = full.summary()
        assert len(rows) == 4
        first = [c for c in full.cells if c.config_id == rows[0]["config_id"]]
        assert rows[0]["accuracy"] == pytest.approx(np.mean([c.metrics.accuracy for c in first]))
        assert (tmp_path / "g" / "cells.csv").is_file() and (tmp_path / "g" / "summary.csv").is_file()
        loaded = load_grid(tmp_path / "g")
        assert loaded.config_order == full.config_order
        assert select_best(loaded) in full.config_order
        assert pooling_report(loaded, "max").splitlines()[1].startswith("lenet5,ThereExists,")

    def test_config_id(self):
        assert config_id("model7", MOST, 0.001, 64, 200) == "model7|Most|lr=0.001|bs=64|ep=200"

    def test_divergent_cell_marked(self, corpus, monkeypatch):
        _, part, series = corpus

        def boom(*a, **k):
            raise TrainingDiverged(3, float("nan"))

        monkeypatch.setattr(harness, "train", boom)
        res = run_grid(self.spec(), part, series, folds=[0])
        assert res.cells and all(not c.ok and "epoch 3" in c.error for c in res.cells)
        assert all(r["folds_ok"] == 0 for r in res.summary())


class TestStream:
    def setup_method(self):
        self.series = tiny_series(T=10, V=4)
        self.stats = fit_stats(self.series.values())
        self.net = build_layout("lenet5", MOST, 4, 4, 6).build(seed=0)

    def test_event_count_and_first(self):
        s = self.series["run1"]
        events = list(diagnose_stream(self.net, self.stats, zip(s.timestamps, s.samples), 4, 1))
        assert len(events) == 7 and events[0].timestamp == "3"
        for e in events:
            assert abs(e.probabilities.sum() - 1) <= 1e-12

    def test_step(self):
        s = self.series["run1"]
        events = list(diagnose_stream(self.net, self.stats, zip(s.timestamps, s.samples), 4, 3))
        assert [e.timestamp for e in events] == ["3", "6", "9"]

    def test_matches_offline(self):
        s = self.series["run2"]
        online = list(diagnose_stream(self.net, self.stats, zip(s.timestamps, s.samples), 4, 1))
        X, _ = harness.stack_windows([apply_stats(s, self.stats)], 4, 1)
        pred, proba = harness.predict(self.net, X)
        assert [e.predicted for e in online] == pred.tolist()
        np.testing.assert_allclose([e.probabilities for e in online], proba, atol=1e-12, rtol=0)

    def test_bad_row_leaves_buffer(self):
        s = self.series["run1"]
        items = list(zip(s.timestamps, s.samples))
        bad = items[:2] + [("x", [1.0, 2.0, 3.0])] + items[2:]
        out = list(diagnose_stream(self.net, self.stats, bad, 4, 1))
        errors = [e for e in out if isinstance(e, harness.StreamError)]
        assert len(errors) == 1 and errors[0].row == 3
        clean = list(diagnose_stream(self.net, self.stats, items, 4, 1))
        assert [e.predicted for e in out if not isinstance(e, harness.StreamError)] == [e.predicted for e in clean]

    def test_csv_source(self):
        lines = ["timestamp,a,b,fault_class,fault_onset_index,fault_magnitude", "0,1,2,BR1,3,1.5", "1,oops,2,,,"]
        items = list(csv_sample_source(lines, n_variables=2))
        assert items == [("0", [1.0, 2.0]), ("1", None)]

    def test_event_csv(self):
        s = self.series["run1"]
        e = next(iter(diagnose_stream(self.net, self.stats, zip(s.timestamps, s.samples), 4, 1)))
        cells = e.to_csv().split(",")
        assert cells[0] == "3" and cells[1] in CLASSES and len(cells) == 8
