"""Scorer plugins, confusion metrics, and ROC-AUC against a pair-counting oracle."""

import math

import numpy as np
import pytest

from facewatch.errors import ConfigError, MissingScoreError, ScoringError
from facewatch.identity import FaceEmbedding
from facewatch.scoring import (
    ConfusionCounts,
    ScoreRequest,
    build_scorer,
    confusion,
    metrics,
    roc_auc,
    roc_points,
    score,
)


def pair_counting_auc(scores, labels):
    """O(P*N) brute-force AUC: wins plus half-ties over all pos/neg pairs."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


def unit_embedding(rng, dim=16):
    return FaceEmbedding.from_vector(rng.standard_normal(dim))


# -------------------------------------------------------------------- scorers


def test_oracle_noise_sigma_zero_is_exact():
    scorer = build_scorer({"kind": "oracle_noise", "sigma": 0.0})
    out = score(ScoreRequest(true_risk=0.7), scorer)
    assert out.value == 0.7
    assert out.source == "stub"


def test_oracle_noise_requires_true_risk():
    scorer = build_scorer({"kind": "oracle_noise", "sigma": 0.1})
    with pytest.raises(ConfigError):
        score(ScoreRequest(true_risk=None), scorer)


def test_oracle_noise_empirical_std_matches_clipped_normal():
    scorer = build_scorer({"kind": "oracle_noise", "sigma": 0.15}, seed=7)
    draws = np.array(
        [score(ScoreRequest(true_risk=0.5), scorer).value for _ in range(10_000)]
    )
    assert draws.min() >= 0.0 and draws.max() <= 1.0
    # independent Monte Carlo oracle for the std of clip(0.5 + N(0, 0.15), 0, 1)
    ref = np.clip(0.5 + np.random.default_rng(1234).normal(0.0, 0.15, 200_000), 0, 1)
    assert abs(draws.std() - ref.std()) < 0.005


def test_oracle_noise_is_seed_deterministic():
    def run(seed):
        scorer = build_scorer({"kind": "oracle_noise", "sigma": 0.15}, seed=seed)
        return [score(ScoreRequest(true_risk=0.5), scorer).value for _ in range(10)]

    assert run(3) == run(3)
    assert run(3) != run(4)


def test_logistic_zero_weights_give_half():
    rng = np.random.default_rng(0)
    scorer = build_scorer({"kind": "logistic", "weights": [0.0] * 16, "bias": 0.0})
    for _ in range(5):
        out = score(ScoreRequest(embedding=unit_embedding(rng)), scorer)
        assert out.value == 0.5


def test_logistic_matches_sigmoid_formula():
    rng = np.random.default_rng(1)
    weights = rng.standard_normal(8).tolist()
    bias = 0.3
    scorer = build_scorer({"kind": "logistic", "weights": weights, "bias": bias})
    emb = unit_embedding(rng, 8)
    out = score(ScoreRequest(embedding=emb), scorer)
    z = float(np.dot(weights, emb.vector)) + bias
    assert abs(out.value - 1.0 / (1.0 + math.exp(-z))) <= 1e-12


def test_file_lookup_round_trip(tmp_path):
    path = tmp_path / "scores.csv"
    path.write_text(
        "stream_id,frame_index,label,score\n"
        "cam,0,alice,0.25\n"
        "cam,1,alice,0.75\n"
    )
    scorer = build_scorer({"kind": "file_lookup", "path": str(path)})
    req = ScoreRequest(stream_id="cam", frame_index=1, label="alice")
    assert score(req, scorer).value == 0.75
    with pytest.raises(MissingScoreError):
        score(ScoreRequest(stream_id="cam", frame_index=9, label="alice"), scorer)


def test_build_scorer_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        build_scorer({"kind": "magic"})


# ------------------------------------------------------------------ confusion


def test_confusion_single_true_positive():
    counts = confusion([0.9], [1], threshold=0.5)
    assert (counts.tp, counts.tn, counts.fp, counts.fn) == (1, 0, 0, 0)


def test_confusion_hand_fixture():
    counts = confusion([0.9, 0.1, 0.6, 0.4], [1, 0, 0, 1], threshold=0.5)
    assert (counts.tp, counts.tn, counts.fp, counts.fn) == (1, 1, 1, 1)


def test_confusion_threshold_zero_predicts_all_positive():
    counts = confusion([0.9, 0.1, 0.6, 0.4], [1, 0, 0, 1], threshold=0.0)
    assert counts.fn == 0 and counts.tn == 0
    assert counts.tp + counts.fp == 4


def test_confusion_threshold_is_inclusive():
    counts = confusion([0.5], [1], threshold=0.5)
    assert counts.tp == 1


def test_confusion_length_mismatch():
    with pytest.raises(ScoringError):
        confusion([0.5], [1, 0])


def test_confusion_partitions_input():
    rng = np.random.default_rng(2)
    scores = rng.random(37)
    labels = rng.integers(0, 2, 37)
    counts = confusion(scores.tolist(), labels.tolist(), threshold=0.3)
    assert counts.tp + counts.tn + counts.fp + counts.fn == 37


# -------------------------------------------------------------------- metrics


def test_metrics_balanced_fixture():
    result = metrics(ConfusionCounts(tp=1, tn=1, fp=1, fn=1))
    assert result.accuracy == 0.5
    assert result.precision == 0.5
    assert result.recall == 0.5
    assert result.f1 == 0.5
    assert result.degenerate == frozenset()


def test_metrics_perfect_classifier():
    result = metrics(ConfusionCounts(tp=7, tn=0, fp=0, fn=0))
    assert (result.accuracy, result.precision, result.recall, result.f1) == (1, 1, 1, 1)


def test_metrics_zero_denominator_convention():
    result = metrics(ConfusionCounts(tp=0, tn=5, fp=0, fn=5))
    assert result.accuracy == 0.5
    assert result.precision == 0.0 and "precision" in result.degenerate
    assert result.recall == 0.0 and "recall" not in result.degenerate
    assert result.f1 == 0.0 and "f1" in result.degenerate


def test_metrics_all_zero_counts_rejected():
    with pytest.raises(ScoringError):
        metrics(ConfusionCounts())


def test_recall_uses_fn_denominator():
    # tp=2, tn=3, fn=1: recall must be 2/3; a TP/(TP+TN) variant would say 0.4
    result = metrics(ConfusionCounts(tp=2, tn=3, fp=0, fn=1))
    assert abs(result.recall - 2.0 / 3.0) <= 1e-15
    assert "TP / (TP + FN)".replace(" ", "") in (metrics.__doc__ or "").replace(" ", "")


def test_accuracy_plus_error_rate_is_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        counts = confusion(rng.random(25).tolist(), rng.integers(0, 2, 25).tolist())
        result = metrics(counts)
        wrong = (counts.fp + counts.fn) / counts.total
        assert abs(result.accuracy + wrong - 1.0) <= 1e-15


# -------------------------------------------------------------------- roc_auc


def test_roc_auc_perfect_separation():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_roc_auc_inverted_separation():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_roc_auc_all_tied_is_half():
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5


def test_roc_auc_single_class_rejected():
    with pytest.raises(ScoringError):
        roc_auc([0.1, 0.9], [1, 1])


def test_roc_auc_matches_pair_counting_oracle():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(2, 80))
        scores = np.round(rng.random(n), 2).tolist()  # rounding forces ties
        labels = rng.integers(0, 2, n).tolist()
        if sum(labels) in (0, n):
            labels[0] = 1 - labels[0]
        assert abs(roc_auc(scores, labels) - pair_counting_auc(scores, labels)) <= 1e-9


def test_roc_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(5)
    scores = rng.random(60).tolist()
    labels = rng.integers(0, 2, 60).tolist()
    labels[0], labels[1] = 0, 1
    base = roc_auc(scores, labels)
    warped = [math.exp(3.0 * s) for s in scores]
    assert abs(roc_auc(warped, labels) - base) <= 1e-12


def test_roc_points_trapezoid_area_equals_auc():
    rng = np.random.default_rng(6)
    for _ in range(10):
        n = int(rng.integers(4, 60))
        scores = np.round(rng.random(n), 1).tolist()
        labels = rng.integers(0, 2, n).tolist()
        if sum(labels) in (0, n):
            labels[0] = 1 - labels[0]
        pts = roc_points(scores, labels)
        assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
        area = 0.0
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            assert x1 >= x0 and y1 >= y0  # monotone curve
            area += (x1 - x0) * (y0 + y1) / 2.0
        assert abs(area - roc_auc(scores, labels)) <= 1e-9
