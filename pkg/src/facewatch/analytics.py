"""Longitudinal risk analytics: sample store, window descriptors, change detection.

Scores live as <timestamp, value> pairs per subject in an append-only JSONL
store. Windows are summarized by exact population moments and an equal-width
histogram over [0, 1]; adjacent windows are compared with a two-sided
Mann-Whitney U test (normal approximation, tie corrected) and a smoothed KL
divergence, reported as D(current || previous).
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DivergenceUndefinedError, StoreError
from .processes import RiskProcess
from .ranking import fractional_ranks

DEFAULT_BINS = 50
DEFAULT_KL_EPSILON = 1e-6
MIN_WINDOW_COUNT = 8


@dataclass
class RiskSample:
    subject_id: str
    timestamp_ms: int
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise StoreError(f"risk value must lie in [0,1], got {self.value}")


@dataclass
class WindowStats:
    """Descriptors of one window: exact population moments plus a histogram."""

    count: int
    mean: float | None
    variance: float | None
    histogram: list[float] | None
    t_start: int
    t_end: int

    @property
    def is_empty(self) -> bool:
        return self.count == 0


@dataclass
class ChangeVerdict:
    direction: str  # "up" | "down" | "none"
    p_value: float
    kl: float
    effect_size: float
    small_sample: bool = False


class RiskStore:
    """Append-only JSONL store of risk samples, indexed per subject in memory.

    Appends are serialized; reads return timestamp-sorted copies so callers
    see a consistent snapshot regardless of append interleaving.
    """

    def __init__(self, path, batch_size: int = 1):
        if batch_size < 1:
            raise StoreError(f"batch_size must be >= 1, got {batch_size}")
        self.path = Path(path)
        self.batch_size = batch_size
        self._by_subject: dict[str, list[RiskSample]] = {}
        self._pending: list[RiskSample] = []
        self._lock = threading.Lock()
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        for lineno, raw in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
            if not raw.strip():
                continue
            try:
                doc = json.loads(raw)
                sample = RiskSample(
                    subject_id=doc["subject_id"],
                    timestamp_ms=int(doc["timestamp_ms"]),
                    value=float(doc["value"]),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise StoreError(f"{self.path} line {lineno}: {exc}") from exc
            self._by_subject.setdefault(sample.subject_id, []).append(sample)

    def append(self, sample: RiskSample) -> None:
        with self._lock:
            self._by_subject.setdefault(sample.subject_id, []).append(sample)
            self._pending.append(sample)
            if len(self._pending) >= self.batch_size:
                self._flush_locked()

    def flush(self) -> None:
        with self._lock:
            self._flush_locked()

    def _flush_locked(self) -> None:
        if not self._pending:
            return
        lines = [
            json.dumps({"subject_id": s.subject_id, "timestamp_ms": s.timestamp_ms,
                        "value": s.value})
            for s in self._pending
        ]
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write("\n".join(lines) + "\n")
            handle.flush()
        self._pending.clear()

    def subjects(self) -> list[str]:
        with self._lock:
            return sorted(self._by_subject)

    def samples_for(self, subject_id: str) -> list[RiskSample]:
        with self._lock:
            samples = list(self._by_subject.get(subject_id, []))
        return sorted(samples, key=lambda s: s.timestamp_ms)

    def samples_between(self, subject_id: str, t_start_ms: int, t_end_ms: int) -> list[RiskSample]:
        """Samples with t_start_ms <= timestamp < t_end_ms, sorted by timestamp."""
        return [s for s in self.samples_for(subject_id) if t_start_ms <= s.timestamp_ms < t_end_ms]

    def __enter__(self) -> "RiskStore":
        return self

    def __exit__(self, *exc_info) -> None:
        self.flush()


def append_sample(store: RiskStore, sample: RiskSample) -> None:
    store.append(sample)


def _values(samples: Sequence) -> np.ndarray:
    return np.asarray(
        [s.value if isinstance(s, RiskSample) else float(s) for s in samples],
        dtype=np.float64,
    )


def window_stats(
    samples: Sequence,
    bins: int = DEFAULT_BINS,
    t_start: int | None = None,
    t_end: int | None = None,
) -> WindowStats:
    """Exact population mean/variance and a normalized equal-width histogram.

    Bin b covers [b/B, (b+1)/B) with the last bin closed at 1.0. An empty
    window yields count 0 with descriptors set to None.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    values = _values(samples)
    timestamps = [s.timestamp_ms for s in samples if isinstance(s, RiskSample)]
    if t_start is None:
        t_start = min(timestamps) if timestamps else 0
    if t_end is None:
        t_end = max(timestamps) if timestamps else 0
    if values.size == 0:
        return WindowStats(count=0, mean=None, variance=None, histogram=None,
                           t_start=t_start, t_end=t_end)
    indices = np.minimum((values * bins).astype(int), bins - 1)
    counts = np.bincount(indices, minlength=bins).astype(np.float64)
    return WindowStats(
        count=int(values.size),
        mean=float(values.mean()),
        variance=float(values.var()),
        histogram=(counts / values.size).tolist(),
        t_start=t_start,
        t_end=t_end,
    )


def kl_divergence(p: Sequence[float], q: Sequence[float], epsilon: float = DEFAULT_KL_EPSILON) -> float:
    """KL divergence in nats between histograms after additive smoothing.

    Both inputs gain epsilon per bin and are renormalized before the sum
    P'_b * ln(P'_b / Q'_b). With epsilon = 0, Q must be positive wherever P is.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    if p_arr.shape != q_arr.shape or p_arr.ndim != 1:
        raise ValueError(f"histograms must share one shape, got {p_arr.shape} vs {q_arr.shape}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if np.any(p_arr < 0) or np.any(q_arr < 0):
        raise ValueError("histogram masses must be non-negative")
    p_s = p_arr + epsilon
    q_s = q_arr + epsilon
    if np.any((q_s == 0) & (p_s > 0)):
        raise DivergenceUndefinedError(
            "Q has zero mass where P is positive and smoothing is disabled"
        )
    p_n = p_s / p_s.sum()
    q_n = q_s / q_s.sum()
    mask = p_n > 0
    result = float(np.sum(p_n[mask] * np.log(p_n[mask] / q_n[mask])))
    return max(result, 0.0)


def mann_whitney_u(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Two-sided Mann-Whitney U with normal approximation and tie correction.

    Returns (U, p) where U counts pairs with y > x plus half the ties, i.e.
    the statistic of the second sample. Degenerate pooled data (all values
    identical) yields p = 1.
    """
    x_arr = _values(x)
    y_arr = _values(y)
    n_x, n_y = x_arr.size, y_arr.size
    if n_x == 0 or n_y == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([x_arr, y_arr])
    ranks = fractional_ranks(pooled)
    rank_sum_y = float(ranks[n_x:].sum())
    u_y = rank_sum_y - n_y * (n_y + 1) / 2.0

    n = n_x + n_y
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts))
    variance = (n_x * n_y / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if variance <= 0:
        return u_y, 1.0
    z = (u_y - n_x * n_y / 2.0) / math.sqrt(variance)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return u_y, min(max(p, 0.0), 1.0)


def change_test(
    window_a: Sequence,
    window_b: Sequence,
    alpha: float = 0.01,
    bins: int = DEFAULT_BINS,
    epsilon: float = DEFAULT_KL_EPSILON,
) -> ChangeVerdict:
    """Compare two sample windows for a risk shift.

    Direction is "up"/"down" only when the two-sided test is significant at
    alpha and the means order accordingly. Windows below MIN_WINDOW_COUNT
    samples yield a small-sample verdict of "none" with p = 1. The reported
    divergence is D(window_b || window_a).
    """
    a = _values(window_a)
    b = _values(window_b)
    kl = 0.0
    if a.size > 0 and b.size > 0:
        hist_a = window_stats(a, bins=bins).histogram
        hist_b = window_stats(b, bins=bins).histogram
        kl = kl_divergence(hist_b, hist_a, epsilon=epsilon)
    effect = float(b.mean() - a.mean()) if a.size > 0 and b.size > 0 else 0.0
    if a.size < MIN_WINDOW_COUNT or b.size < MIN_WINDOW_COUNT:
        return ChangeVerdict(direction="none", p_value=1.0, kl=kl,
                             effect_size=effect, small_sample=True)
    _, p = mann_whitney_u(a, b)
    direction = "none"
    if p < alpha:
        if effect > 0:
            direction = "up"
        elif effect < 0:
            direction = "down"
    return ChangeVerdict(direction=direction, p_value=p, kl=kl, effect_size=effect)


def patient_level_score(samples: Sequence) -> float:
    """Arithmetic mean of sample values; the subject-level aggregate."""
    values = _values(samples)
    if values.size == 0:
        raise ValueError("cannot aggregate an empty sample list")
    return float(values.mean())


def stability_curve(
    process: RiskProcess,
    window_sizes: Sequence[int],
    repeats: int,
    seed: int = 0,
) -> list[tuple[int, float]]:
    """Variance of the window mean as a function of window size.

    For each size, draws `repeats` independent windows from the process and
    records the population variance of their means. Deterministic per seed.
    """
    sizes = list(window_sizes)
    if any(s <= 0 for s in sizes) or sorted(sizes) != sizes:
        raise ValueError(f"window sizes must be positive and increasing, got {sizes}")
    if repeats < 2:
        raise ValueError(f"repeats must be >= 2, got {repeats}")
    rng = np.random.default_rng(seed)
    curve = []
    for size in sizes:
        means = np.empty(repeats, dtype=np.float64)
        for r in range(repeats):
            window = [process.sample_at(rng, float(i)) for i in range(size)]
            means[r] = float(np.mean(window))
        # identical means have zero variance by definition; skip the rounding
        # residue np.var leaves behind
        spread = 0.0 if means.min() == means.max() else float(means.var())
        curve.append((size, spread))
    return curve
