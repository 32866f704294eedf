import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owadiag.dataprep import FAULT_CLASSES, load_manifest, load_series
from owadiag.synthplant import (
    FaultSpec,
    PlantConfig,
    affected_channels,
    apply_fault,
    clean_signal,
    default_combos,
    generate_corpus,
    generate_run,
)

SMALL = PlantConfig(run_length=40)


def test_nonfault_run():
    s = generate_run(SMALL, None, seed=3)
    assert s.fault is None
    assert s.samples.shape == (40, 12) and np.isfinite(s.samples).all()


def test_deterministic():
    spec = FaultSpec("QrQw", 10, 2.0)
    a = generate_run(SMALL, spec, seed=[1, 2])
    b = generate_run(SMALL, spec, seed=[1, 2])
    assert a.samples.tobytes() == b.samples.tobytes()
    assert generate_run(SMALL, spec, seed=[1, 3]).samples.tobytes() != a.samples.tobytes()


def test_bias_shift_exact():
    clean = clean_signal(SMALL, 5)
    spec = FaultSpec("QCaD", 12, 1.7)
    faulty = apply_fault(clean, spec)
    diff = faulty - clean
    ch = affected_channels("QCaD", 12)
    np.testing.assert_array_equal(diff[:12], 0)
    np.testing.assert_allclose(diff[12:, list(ch)], 1.7, atol=1e-12)
    others = [c for c in range(12) if c not in ch]
    np.testing.assert_array_equal(diff[:, others], 0)


def test_signatures():
    clean = clean_signal(SMALL, 0)
    drift = apply_fault(clean, FaultSpec("BR1", 5, 2.0)) - clean
    ch = list(affected_channels("BR1", 12))
    assert drift[5, ch[0]] == pytest.approx(2.0 / 4) and drift[30, ch[0]] == pytest.approx(2.0)
    stuck = apply_fault(clean, FaultSpec("O2", 5, 1.0))
    c = affected_channels("O2", 12)[0]
    assert np.all(stuck[5:, c] == clean[5, c] + 1.0)
    gain = apply_fault(clean, FaultSpec("Kla", 5, 0.5))
    c = affected_channels("Kla", 12)[0]
    np.testing.assert_allclose(gain[5:, c], 1.5 * clean[5:, c])


def test_class_channel_sets_distinct():
    sets = {cls: affected_channels(cls, 12) for cls in FAULT_CLASSES}
    assert all(sets.values())
    assert len({frozenset(v) for v in sets.values()}) == len(sets)


@pytest.mark.parametrize("V", [1, 5, 140])
def test_channels_rescale(V):
    for cls in FAULT_CLASSES:
        assert all(0 <= c < V for c in affected_channels(cls, V))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(FAULT_CLASSES), st.floats(0.1, 5), st.floats(0.1, 5), st.integers(0, 30))
def test_magnitude_monotone(cls, m1, m2, seed):
    lo, hi = sorted((m1, m2))
    if hi - lo < 1e-6:
        return
    clean = clean_signal(SMALL, seed)
    ch = list(affected_channels(cls, 12))
    dev = lambda m: np.abs(apply_fault(clean, FaultSpec(cls, 8, m)) - clean)[8:, ch].sum()
    assert dev(hi) > dev(lo)


def test_onset_out_of_range():
    with pytest.raises(ValueError, match="onset"):
        generate_run(SMALL, FaultSpec("BR1", 40, 1.0))


@pytest.mark.parametrize("kw", [dict(fault_class="X", onset=1, magnitude=1.0),
                                dict(fault_class="BR1", onset=1, magnitude=0.0),
                                dict(fault_class="BR1", onset=-1, magnitude=1.0),
                                dict(fault_class="BR1", onset=1, magnitude=1.0, channels=())])
def test_bad_fault_spec(kw):
    with pytest.raises(ValueError):
        FaultSpec(**kw)


def test_default_combos():
    combos = default_combos(PlantConfig())
    assert len(combos) == 10
    assert all(0 <= o < 288 and m > 0 for o, m in combos)
    assert len({m for _, m in combos}) == 10


def test_corpus_counts(tmp_path):
    cfg = PlantConfig(run_length=12)
    corpus = generate_corpus(tmp_path, cfg, runs_per_combo=10, nonfault_runs=5, seed=1)
    files = sorted(p.name for p in tmp_path.glob("*.csv") if p.name != "manifest.csv")
    assert len(files) == 505 == len(corpus.records)
    recs = load_manifest(tmp_path)
    assert len(recs) == len(files)
    s = load_series(tmp_path / recs[-1].path)
    assert s.fault.fault_class == recs[-1].fault_class and s.fault.onset == recs[-1].onset


def test_corpus_reproducible(tmp_path):
    cfg = PlantConfig(run_length=10)
    digest = []
    for d in ("a", "b"):
        generate_corpus(tmp_path / d, cfg, combos=[(3, 2.0)], runs_per_combo=2, nonfault_runs=1, seed=4)
        h = hashlib.sha256()
        for p in sorted((tmp_path / d).glob("*.csv")):
            h.update(p.read_bytes())
        digest.append(h.hexdigest())
    assert digest[0] == digest[1]


def test_run_stream_independent_of_order(tmp_path):
    cfg = PlantConfig(run_length=10)
    a = generate_corpus(tmp_path / "a", cfg, combos=[(3, 2.0)], runs_per_combo=2, nonfault_runs=1, seed=0)
    b = generate_corpus(tmp_path / "b", cfg, combos=[(3, 2.0)], runs_per_combo=2, nonfault_runs=1, seed=0,
                        classes=("O2",))
    assert (tmp_path / "a" / "O2_c00_r01.csv").read_bytes() == (tmp_path / "b" / "O2_c00_r01.csv").read_bytes()
    assert len(b.records) < len(a.records)
