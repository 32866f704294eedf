"""Deterministic synthetic stand-in for WWTP monitoring runs.

Latent factors (a diurnal sinusoid plus an AR(1) process each) are mixed into
``V`` channels through a fixed plant matrix, then sensor noise is added.
Faults act on the noise-free signal of class-specific channel groups from the
onset sample onward.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataprep import (
    FAULT_CLASSES,
    FaultAnnotation,
    MonitoringSeries,
    RunRecord,
    class_id,
    write_manifest,
    write_series,
)

SIGNATURES = ("bias", "drift", "stuck", "gain")

# channel positions for a 12-variable plant, rescaled for other widths
_BASE_CHANNELS = {
    "BR1": ((0, 1, 2), "drift"),
    "QrQw": ((3, 4), "bias"),
    "QCaD": ((5,), "bias"),
    "Kla": ((6, 7), "gain"),
    "O2": ((8,), "stuck"),
}

# samples over which a drift reaches its full magnitude
DRIFT_HORIZON = 4

# soft and severe ends of the default fault magnitudes
MAGNITUDE_RANGE = (3.0, 8.0)


@dataclass(frozen=True)
class PlantConfig:
    n_variables: int = 12
    n_factors: int = 4
    mixing_seed: int = 0
    diurnal_period: int = 96  # samples per day at 15-minute sampling
    noise_sigma: float = 0.1
    sampling_minutes: float = 15.0
    run_length: int = 288
    ar_coef: float = 0.9
    ar_sigma: float = 0.15

    def __post_init__(self):
        if self.n_variables < 1 or self.n_factors < 1:
            raise ValueError("n_variables and n_factors must be >= 1")
        if self.run_length < 1:
            raise ValueError("run_length must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.diurnal_period < 1:
            raise ValueError("diurnal_period must be >= 1")

    def mixing(self):
        """Plant structure shared by every run: (mixing matrix [V, F], channel offsets [V])."""
        rng = np.random.default_rng([self.mixing_seed, 0x504C414E])
        M = rng.normal(0.0, 1.0 / np.sqrt(self.n_factors), size=(self.n_variables, self.n_factors))
        offset = rng.uniform(1.0, 3.0, size=self.n_variables)
        return M, offset


def affected_channels(fault_class: str, n_variables: int) -> tuple[int, ...]:
    base, _ = _BASE_CHANNELS[fault_class]
    return tuple(sorted({(i * n_variables) // 12 for i in base}))


@dataclass(frozen=True)
class FaultSpec:
    fault_class: str
    onset: int
    magnitude: float
    signature: str | None = None
    channels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.fault_class not in FAULT_CLASSES:
            raise ValueError(f"unknown fault class {self.fault_class!r}; expected one of {FAULT_CLASSES}")
        if not self.magnitude > 0:
            raise ValueError(f"fault magnitude must be > 0, got {self.magnitude}")
        if self.onset < 0:
            raise ValueError(f"fault onset must be >= 0, got {self.onset}")
        sig = self.signature or _BASE_CHANNELS[self.fault_class][1]
        if sig not in SIGNATURES:
            raise ValueError(f"unknown signature {sig!r}")
        object.__setattr__(self, "signature", sig)
        if self.channels is not None and len(self.channels) == 0:
            raise ValueError("affected channel set must be non-empty")

    def resolve_channels(self, n_variables: int) -> tuple[int, ...]:
        return self.channels if self.channels is not None else affected_channels(self.fault_class, n_variables)


def clean_signal(config: PlantConfig, seed) -> np.ndarray:
    """Noise-free plant signal [T, V] for one run."""
    rng = np.random.default_rng(seed)
    T, F = config.run_length, config.n_factors
    t = np.arange(T)
    phase = rng.uniform(0, 2 * np.pi, size=F)
    amp = rng.uniform(0.5, 1.0, size=F)
    harmonic = np.arange(1, F + 1)
    factors = amp * np.sin(2 * np.pi * np.outer(t, harmonic) / config.diurnal_period + phase)
    ar = np.empty((T, F))
    state = rng.normal(0.0, config.ar_sigma / np.sqrt(1 - config.ar_coef**2), size=F)
    for i in range(T):
        state = config.ar_coef * state + rng.normal(0.0, config.ar_sigma, size=F)
        ar[i] = state
    M, offset = config.mixing()
    return (factors + ar) @ M.T + offset


def apply_fault(signal: np.ndarray, fault: FaultSpec, n_variables: int | None = None) -> np.ndarray:
    """Return a copy of ``signal`` with the fault signature injected."""
    x = signal.copy()
    T = x.shape[0]
    if not 0 <= fault.onset < T:
        raise ValueError(f"fault onset {fault.onset} outside [0, {T})")
    ch = list(fault.resolve_channels(n_variables or x.shape[1]))
    s, m = fault.onset, fault.magnitude
    if fault.signature == "bias":
        x[s:, ch] += m
    elif fault.signature == "drift":
        ramp = np.minimum(np.arange(1, T - s + 1) / DRIFT_HORIZON, 1.0)
        x[s:, ch] += m * ramp[:, None]
    elif fault.signature == "stuck":
        x[s:, ch] = x[s, ch] + m
    else:  # gain
        x[s:, ch] *= 1.0 + m
    return x


def generate_run(config: PlantConfig, fault: FaultSpec | None = None, seed=0, run_id: str = "run") -> MonitoringSeries:
    """One monitoring run; bitwise-deterministic in (config, fault, seed)."""
    if fault is not None and not 0 <= fault.onset < config.run_length:
        raise ValueError(f"fault onset {fault.onset} outside [0, {config.run_length})")
    ss = np.random.SeedSequence(seed if not isinstance(seed, (tuple, list)) else list(seed))
    sig_seed, noise_seed = ss.spawn(2)
    x = clean_signal(config, sig_seed)
    if fault is not None:
        x = apply_fault(x, fault, config.n_variables)
    noise = np.random.default_rng(noise_seed).normal(0.0, 1.0, size=x.shape) * config.noise_sigma
    ann = None if fault is None else FaultAnnotation(fault.fault_class, fault.onset, repr(float(fault.magnitude)))
    return MonitoringSeries(
        run_id=run_id,
        variables=tuple(f"x{i + 1:03d}" for i in range(config.n_variables)),
        samples=x + noise,
        sampling_minutes=config.sampling_minutes,
        fault=ann,
    )


def default_combos(config: PlantConfig, n: int = 10,
                   magnitudes: tuple[float, float] = MAGNITUDE_RANGE) -> list[tuple[int, float]]:
    """``n`` (onset, magnitude) pairs from early/soft to late/severe faults."""
    T = config.run_length
    lo, hi = magnitudes
    if not 0 < lo <= hi:
        raise ValueError(f"magnitudes must satisfy 0 < lo <= hi, got {magnitudes}")
    onsets = np.linspace(0.15 * T, 0.6 * T, n).round().astype(int)
    mags = np.geomspace(lo, hi, n)
    # interleave so early onsets are not always the mildest
    order = np.arange(n)
    mags = mags[(order * 3) % n] if n % 3 else mags
    return [(int(min(max(o, 0), T - 1)), float(m)) for o, m in zip(onsets, mags)]


@dataclass
class Corpus:
    root: Path
    records: list[RunRecord] = field(default_factory=list)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.csv"


def _run_seed(seed: int, run_id: str):
    digest = hashlib.sha256(run_id.encode()).digest()
    return [int(seed), int.from_bytes(digest[:8], "little")]


def generate_corpus(
    out_dir,
    config: PlantConfig = PlantConfig(),
    combos: dict[str, list[tuple[int, float]]] | list[tuple[int, float]] | None = None,
    runs_per_combo: int = 10,
    nonfault_runs: int = 5,
    seed: int = 0,
    classes=FAULT_CLASSES,
) -> Corpus:
    """Write one CSV per run plus ``manifest.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if runs_per_combo < 0 or nonfault_runs < 0:
        raise ValueError("run counts must be >= 0")
    classes = [c for c in FAULT_CLASSES if c in set(classes)]
    if combos is None:
        combos = default_combos(config)
    per_class = combos if isinstance(combos, dict) else {c: combos for c in classes}
    records = []
    for r in range(nonfault_runs):
        rid = f"NonFault_r{r:02d}"
        s = generate_run(config, None, _run_seed(seed, rid), rid)
        write_series(out / f"{rid}.csv", s)
        records.append(RunRecord(rid, "NonFault", -1, r, f"{rid}.csv"))
    for cls in classes:
        for ci, (onset, mag) in enumerate(per_class[cls]):
            for r in range(runs_per_combo):
                rid = f"{cls}_c{ci:02d}_r{r:02d}"
                spec = FaultSpec(cls, int(onset), float(mag))
                s = generate_run(config, spec, _run_seed(seed, rid), rid)
                write_series(out / f"{rid}.csv", s)
                records.append(RunRecord(rid, cls, ci, r, f"{rid}.csv", int(onset), float(mag)))
    write_manifest(out / "manifest.csv", records)
    return Corpus(out, records)


__all__ = [
    "PlantConfig",
    "FaultSpec",
    "Corpus",
    "affected_channels",
    "apply_fault",
    "clean_signal",
    "class_id",
    "default_combos",
    "generate_corpus",
    "generate_run",
]
