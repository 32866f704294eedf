"""RIM linguistic quantifiers and the OWA operators they generate.

A quantifier ``Q: [0, 1] -> [0, 1]`` yields, for any cardinality ``n``, the
weight vector ``w_i = Q(i/n) - Q((i-1)/n)``.  Weight ``w_j`` multiplies the
j-th *largest* aggregated value.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DEFAULT_ALPHA = {"AtMiddle": 0.2, "AtLeast": 0.75}

# composite-rule resolution for the continuous orness integral
ORNESS_INTERVALS = 10_000


class Kind(str, enum.Enum):
    THERE_EXISTS = "ThereExists"
    AVERAGE = "Average"
    MOST = "Most"
    AT_LEAST_HALF = "AtLeastHalf"
    AT_MIDDLE = "AtMiddle"
    AT_LEAST = "AtLeast"


_ALIASES = {
    "thereexists": Kind.THERE_EXISTS,
    "there_exists": Kind.THERE_EXISTS,
    "max": Kind.THERE_EXISTS,
    "average": Kind.AVERAGE,
    "mean": Kind.AVERAGE,
    "avg": Kind.AVERAGE,
    "most": Kind.MOST,
    "atleasthalf": Kind.AT_LEAST_HALF,
    "at_least_half": Kind.AT_LEAST_HALF,
    "atmiddle": Kind.AT_MIDDLE,
    "at_middle": Kind.AT_MIDDLE,
    "atleast": Kind.AT_LEAST,
    "at_least": Kind.AT_LEAST,
}

PARAMETRIC = (Kind.AT_MIDDLE, Kind.AT_LEAST)


@dataclass(frozen=True)
class Quantifier:
    """A RIM quantifier; ``alpha`` is only meaningful for AtMiddle/AtLeast."""

    kind: Kind
    alpha: float | None = None

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in PARAMETRIC:
            alpha = DEFAULT_ALPHA[kind.value] if self.alpha is None else float(self.alpha)
            if not np.isfinite(alpha):
                raise ValueError(f"alpha must be finite, got {alpha!r}")
            if kind is Kind.AT_MIDDLE and not 0.0 < alpha < 0.5:
                raise ValueError(f"alpha for AtMiddle must lie in (0, 0.5), got {alpha}")
            if kind is Kind.AT_LEAST and not 0.0 < alpha <= 1.0:
                raise ValueError(f"alpha for AtLeast must lie in (0, 1], got {alpha}")
            object.__setattr__(self, "alpha", alpha)
        elif self.alpha is not None:
            raise ValueError(f"alpha is not a parameter of {kind.value}")

    @property
    def label(self) -> str:
        if self.alpha is None:
            return self.kind.value
        return f"{self.kind.value}({self.alpha:g})"

    def __call__(self, x):
        return evaluate(self, x)


def parse_quantifier(text: str, alpha: float | None = None) -> Quantifier:
    """Build a quantifier from a name such as ``most``, ``max`` or ``atmiddle:0.2``."""
    name, _, tail = text.strip().partition(":")
    key = name.strip().lower()
    if key not in _ALIASES:
        try:
            kind = Kind(name.strip())
        except ValueError:
            raise ValueError(f"unknown quantifier {text!r}") from None
    else:
        kind = _ALIASES[key]
    if tail:
        if alpha is not None:
            raise ValueError("alpha given twice")
        alpha = float(tail)
    return Quantifier(kind, alpha)


def _raw(q: Quantifier, x: float) -> float:
    k = q.kind
    if k is Kind.THERE_EXISTS:
        return 0.0 if x == 0.0 else 1.0
    if k is Kind.AVERAGE:
        return x
    if k is Kind.MOST:
        if x <= 0.3:
            return 0.0
        if x <= 0.8:
            return 2.0 * (x - 0.3)
        return 1.0
    if k is Kind.AT_LEAST_HALF:
        return 2.0 * x if x <= 0.5 else 1.0
    a = q.alpha
    if k is Kind.AT_MIDDLE:
        if x <= a:
            return 0.0
        if x <= 1.0 - a:
            return 2.0 * (x - a)
        return 1.0
    # AtLeast
    return x / a if x <= a else 1.0


def evaluate(q: Quantifier, x: float) -> float:
    """Membership degree ``Q(x)``, clamped into [0, 1]."""
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    return min(1.0, max(0.0, _raw(q, x)))


@dataclass(frozen=True)
class OwaWeights:
    weights: np.ndarray

    @property
    def n(self) -> int:
        return int(self.weights.shape[0])

    def __len__(self):
        return self.n

    def __iter__(self):
        return iter(self.weights.tolist())


def rim_weights(q: Quantifier, n: int) -> OwaWeights:
    """OWA weights from successive differences of ``Q`` at ``i/n``."""
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    return OwaWeights(_weights_cached(q, int(n)).copy())


@lru_cache(maxsize=256)
def _weights_cached(q: Quantifier, n: int) -> np.ndarray:
    qs = np.array([evaluate(q, i / n) for i in range(n + 1)])
    w = np.diff(qs)
    w.setflags(write=False)
    return w


def _as_weights(w) -> np.ndarray:
    return np.asarray(w.weights if isinstance(w, OwaWeights) else w, dtype=np.float64)


def owa_aggregate(w, values) -> float:
    """Weighted sum of ``values`` sorted in descending order (stable on ties)."""
    wv = _as_weights(w)
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.shape[0] != wv.shape[0]:
        raise ValueError(f"values has length {v.shape[0]}, weights expect {wv.shape[0]}")
    order = np.argsort(-v, kind="stable")
    b = v[order]
    acc = wv[0] * b[0]
    for j in range(1, b.shape[0]):
        acc += wv[j] * b[j]
    return float(acc)


def discrete_orness(w) -> float:
    """Orness of a finite weight vector; 0.5 by convention when ``n == 1``."""
    wv = _as_weights(w)
    n = wv.shape[0]
    if n == 1:
        return 0.5
    # divide once at the end so uniform weights give exactly 0.5
    return math.fsum((n - j) * wv[j - 1] for j in range(1, n + 1)) / (n - 1)


def andness(w) -> float:
    return 1.0 - discrete_orness(w)


def _breakpoints(q: Quantifier) -> list[float]:
    k = q.kind
    if k is Kind.MOST:
        pts = [0.3, 0.8]
    elif k is Kind.AT_LEAST_HALF:
        pts = [0.5]
    elif k is Kind.AT_MIDDLE:
        # the rising ramp saturates at alpha + 0.5 when that precedes 1 - alpha
        pts = [q.alpha, min(q.alpha + 0.5, 1.0 - q.alpha), 1.0 - q.alpha]
    elif k is Kind.AT_LEAST:
        pts = [q.alpha]
    else:
        pts = []
    return sorted({0.0, 1.0, *(p for p in pts if 0.0 < p < 1.0)})


def quantifier_orness(q: Quantifier, intervals: int = ORNESS_INTERVALS) -> float:
    """Integral of the clamped ``Q`` over [0, 1].

    Composite midpoint rule on each linear piece, so jump discontinuities
    (ThereExists at 0, AtMiddle for alpha > 0.25) are never sampled.
    """
    pts = _breakpoints(q)
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        m = max(1, round(intervals * (hi - lo)))
        h = (hi - lo) / m
        mids = lo + h * (np.arange(m) + 0.5)
        total += h * sum(evaluate(q, float(x)) for x in mids)
    return float(total)
