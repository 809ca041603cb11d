"""Per-face risk scoring behind a pluggable interface, plus classification metrics.

The real risk model is out of scope; scorers here are stand-ins with exact
contracts: a noisy oracle around annotated ground truth, a logistic readout of
the embedding, and a lookup over precomputed score files.

Recall is computed as TP/(TP+FN). A published variant of the formula divides
by TP+TN instead, which is internally inconsistent with the companion F1
definition; this module deliberately uses the standard form.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, MissingScoreError, ScoringError
from .identity import FaceEmbedding
from .ranking import fractional_ranks

DEFAULT_DECISION_THRESHOLD = 0.5


@dataclass
class RiskScore:
    value: float
    source: str  # "stub" | "external_file" | "plugin"

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ScoringError(f"risk score must lie in [0,1], got {self.value}")


@dataclass
class ScoreRequest:
    """Everything a scorer may key on for one face observation."""

    embedding: FaceEmbedding | None = None
    true_risk: float | None = None
    stream_id: str | None = None
    frame_index: int | None = None
    label: str | None = None


class OracleNoiseScorer:
    """Ground truth plus seeded Gaussian noise, clamped into [0, 1]."""

    kind = "oracle_noise"

    def __init__(self, sigma: float, seed: int = 0):
        if sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {sigma}")
        self.sigma = sigma
        self._rng = np.random.default_rng(seed)

    def score(self, request: ScoreRequest) -> RiskScore:
        if request.true_risk is None:
            raise ConfigError("oracle_noise scorer needs an annotation with true_risk")
        noise = self._rng.normal(0.0, self.sigma) if self.sigma > 0 else 0.0
        value = min(1.0, max(0.0, request.true_risk + noise))
        return RiskScore(value=value, source="stub")


class LogisticScorer:
    """sigmoid(<w, embedding> + b); deterministic."""

    kind = "logistic"

    def __init__(self, weights: Sequence[float], bias: float = 0.0):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)

    def score(self, request: ScoreRequest) -> RiskScore:
        if request.embedding is None:
            raise ScoringError("logistic scorer needs an embedding")
        if request.embedding.dim != self.weights.shape[0]:
            raise ScoringError(
                f"weight dim {self.weights.shape[0]} != embedding dim {request.embedding.dim}"
            )
        z = float(self.weights @ request.embedding.vector) + self.bias
        return RiskScore(value=1.0 / (1.0 + math.exp(-z)), source="stub")


class FileLookupScorer:
    """Precomputed scores keyed by (stream_id, frame_index, label) from a CSV file."""

    kind = "file_lookup"

    def __init__(self, path):
        self.path = Path(path)
        self._table: dict[tuple[str, int, str], float] = {}
        try:
            with self.path.open(newline="", encoding="utf-8") as handle:
                reader = csv.DictReader(handle)
                required = {"stream_id", "frame_index", "label", "score"}
                if reader.fieldnames is None or not required.issubset(reader.fieldnames):
                    raise ScoringError(
                        f"score file {self.path} must have header {sorted(required)}"
                    )
                for row in reader:
                    key = (row["stream_id"], int(row["frame_index"]), row["label"])
                    self._table[key] = float(row["score"])
        except OSError as exc:
            raise ScoringError(f"cannot read score file {self.path}: {exc}") from exc
        except ValueError as exc:
            raise ScoringError(f"malformed score file {self.path}: {exc}") from exc

    def score(self, request: ScoreRequest) -> RiskScore:
        key = (request.stream_id, request.frame_index, request.label)
        if None in key:
            raise ScoringError("file_lookup scorer needs stream_id, frame_index and label")
        if key not in self._table:
            raise MissingScoreError(f"no precomputed score for {key}")
        return RiskScore(value=self._table[key], source="external_file")


Scorer = OracleNoiseScorer | LogisticScorer | FileLookupScorer


def build_scorer(handle: dict, seed: int = 0) -> Scorer:
    """Construct a scorer from its JSON config form."""
    kind = handle.get("kind")
    if kind == "oracle_noise":
        return OracleNoiseScorer(sigma=float(handle.get("sigma", 0.0)),
                                 seed=int(handle.get("seed", seed)))
    if kind == "logistic":
        return LogisticScorer(weights=handle["weights"], bias=float(handle.get("bias", 0.0)))
    if kind == "file_lookup":
        return FileLookupScorer(handle["path"])
    raise ConfigError(f"unknown scorer kind {kind!r}")


def score(request: ScoreRequest, scorer: Scorer) -> RiskScore:
    return scorer.score(request)


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ScoringError(f"{name} must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(
    scores: Sequence[float | RiskScore],
    labels: Sequence[int],
    threshold: float = DEFAULT_DECISION_THRESHOLD,
) -> ConfusionCounts:
    """Count the confusion cells; predicted positive iff score >= threshold."""
    if len(scores) != len(labels):
        raise ScoringError(f"length mismatch: {len(scores)} scores vs {len(labels)} labels")
    counts = ConfusionCounts()
    for s, y in zip(scores, labels):
        value = s.value if isinstance(s, RiskScore) else float(s)
        predicted = value >= threshold
        if predicted and y:
            counts.tp += 1
        elif predicted and not y:
            counts.fp += 1
        elif not predicted and y:
            counts.fn += 1
        else:
            counts.tn += 1
    return counts


@dataclass
class MetricsResult:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: frozenset[str] = field(default_factory=frozenset)


def metrics(counts: ConfusionCounts) -> MetricsResult:
    """Accuracy, precision, recall (TP/(TP+FN)) and F1 from confusion counts.

    A zero-denominator ratio yields 0.0 and flags the metric as degenerate
    rather than propagating NaN.
    """
    if counts.total == 0:
        raise ScoringError("cannot compute metrics over zero items")
    degenerate = set()
    accuracy = (counts.tp + counts.tn) / counts.total
    if counts.tp + counts.fp > 0:
        precision = counts.tp / (counts.tp + counts.fp)
    else:
        precision = 0.0
        degenerate.add("precision")
    if counts.tp + counts.fn > 0:
        recall = counts.tp / (counts.tp + counts.fn)
    else:
        recall = 0.0
        degenerate.add("recall")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        degenerate.add("f1")
    return MetricsResult(accuracy=accuracy, precision=precision, recall=recall, f1=f1,
                         degenerate=frozenset(degenerate))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the rank statistic.

    Equals (#{(i,j): positive i, negative j, s_i > s_j} + 0.5 * ties) / (P * N).
    Requires at least one positive and one negative label.
    """
    if len(scores) != len(labels):
        raise ScoringError(f"length mismatch: {len(scores)} scores vs {len(labels)} labels")
    y = np.asarray(labels, dtype=bool)
    s = np.asarray([v.value if isinstance(v, RiskScore) else float(v) for v in scores])
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ScoringError("roc_auc needs both classes present")
    ranks = fractional_ranks(s)
    rank_sum_pos = float(ranks[y].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float]]:
    """(FPR, TPR) points swept over all score thresholds, from (0,0) to (1,1)."""
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ScoringError("roc_points needs both classes present")
    points = [(0.0, 0.0)]
    for threshold in sorted(set(s.tolist()), reverse=True):
        predicted = s >= threshold
        tpr = float((predicted & y).sum()) / n_pos
        fpr = float((predicted & ~y).sum()) / n_neg
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points
