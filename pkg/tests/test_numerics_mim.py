"""Masked-prediction loss: masking, cross-entropy values, and gradients."""

import math

import numpy as np
import pytest

from facewatch.errors import NumericsError
from facewatch.numerics import (
    MaskSpec,
    cls_logits,
    descent_check,
    make_mask,
    mim_fd_grads,
    mim_loss,
    total_loss,
)


def random_case(seed, n=10, ratio=0.4, k=7):
    rng = np.random.default_rng(seed)
    mask = make_mask(n, ratio, rng)
    logits = rng.standard_normal((mask.count, k))
    targets = rng.integers(0, k, size=n)
    return logits, targets, mask


# -------------------------------------------------------------------- masks


def test_make_mask_size_and_order():
    rng = np.random.default_rng(0)
    for n, ratio in ((10, 0.4), (16, 0.25), (7, 0.5), (9, 1.0), (5, 0.0)):
        mask = make_mask(n, ratio, rng)
        assert mask.count == round(ratio * n)
        assert list(mask.masked_indices) == sorted(set(mask.masked_indices))
        assert all(0 <= i < n for i in mask.masked_indices)


def test_make_mask_seeded_determinism():
    a = make_mask(20, 0.4, np.random.default_rng(5))
    b = make_mask(20, 0.4, np.random.default_rng(5))
    assert a.masked_indices == b.masked_indices


def test_mask_spec_validation():
    with pytest.raises(NumericsError):
        MaskSpec(masked_indices=(2, 1), ratio=0.5, n=4)
    with pytest.raises(NumericsError):
        MaskSpec(masked_indices=(1, 1), ratio=0.5, n=4)
    with pytest.raises(NumericsError):
        MaskSpec(masked_indices=(1, 4), ratio=0.5, n=4)
    with pytest.raises(NumericsError):
        MaskSpec(masked_indices=(1,), ratio=0.5, n=4)  # |M| != round(0.5*4)
    with pytest.raises(NumericsError):
        MaskSpec(masked_indices=(), ratio=1.5, n=4)
    with pytest.raises(NumericsError):
        MaskSpec(masked_indices=(), ratio=0.0, n=0)


# -------------------------------------------------------------- loss values


def test_uniform_logits_give_log_k():
    for k in (2, 3, 5, 16):
        rng = np.random.default_rng(k)
        mask = make_mask(12, 0.5, rng)
        logits = np.zeros((mask.count, k))
        targets = rng.integers(0, k, size=12)
        result = mim_loss(logits, targets, mask)
        assert abs(result.loss - mask.count * math.log(k)) <= 1e-12


def test_two_class_fixture_is_exact():
    mask = MaskSpec(masked_indices=(0,), ratio=0.5, n=2)
    result = mim_loss(np.array([[0.0, 0.0]]), np.array([0, 1]), mask)
    assert result.loss == math.log(2.0)
    np.testing.assert_array_equal(result.grad_logits, [[-0.5, 0.5]])


def test_loss_matches_scalar_cross_entropy():
    for seed in range(20):
        logits, targets, mask = random_case(seed)
        result = mim_loss(logits, targets, mask)
        expected = 0.0
        for row, patch in enumerate(mask.masked_indices):
            scores = logits[row].tolist()
            log_norm = math.log(math.fsum(math.exp(s) for s in scores))
            expected += log_norm - scores[int(targets[patch])]
        assert abs(result.loss - expected) <= 1e-9 * max(1.0, abs(expected))


def test_grad_rows_are_softmax_minus_one_hot():
    logits, targets, mask = random_case(3)
    result = mim_loss(logits, targets, mask)
    for row, patch in enumerate(mask.masked_indices):
        assert abs(float(result.grad_logits[row].sum())) <= 1e-12
        target = int(targets[patch])
        assert result.grad_logits[row, target] < 0
        others = np.delete(result.grad_logits[row], target)
        assert np.all(others > 0)


def test_row_constant_shift_changes_nothing():
    logits, targets, mask = random_case(4)
    base = mim_loss(logits, targets, mask)
    shifted = logits.copy()
    shifted[0] += 37.5
    shifted[-1] -= 12.0
    moved = mim_loss(shifted, targets, mask)
    assert abs(moved.loss - base.loss) <= 1e-9
    np.testing.assert_allclose(moved.grad_logits, base.grad_logits, atol=1e-9)


def test_large_logits_stay_finite():
    mask = MaskSpec(masked_indices=(0, 1), ratio=1.0, n=2)
    result = mim_loss(np.array([[1000.0, 0.0], [0.0, 1000.0]]),
                      np.array([0, 0]), mask)
    assert math.isfinite(result.loss)
    assert np.all(np.isfinite(result.grad_logits))


def test_input_validation():
    logits, targets, mask = random_case(5)
    with pytest.raises(NumericsError):
        mim_loss(logits[:-1], targets, mask)
    with pytest.raises(NumericsError):
        mim_loss(logits, targets[:-1], mask)
    bad = targets.copy()
    bad[mask.masked_indices[0]] = logits.shape[1]
    with pytest.raises(NumericsError):
        mim_loss(logits, bad, mask)
    bad[mask.masked_indices[0]] = -1
    with pytest.raises(NumericsError):
        mim_loss(logits, bad, mask)


# ---------------------------------------------------------------- gradients


def test_gradient_matches_scalar_finite_differences():
    logits, targets, mask = random_case(6, n=6, ratio=0.5, k=4)
    result = mim_loss(logits, targets, mask)

    table = logits.tolist()

    def loss():
        total = []
        for row, patch in enumerate(mask.masked_indices):
            scores = table[row]
            log_norm = math.log(math.fsum(math.exp(s) for s in scores))
            total.append(log_norm - scores[int(targets[patch])])
        return math.fsum(total)

    step = 1e-5
    for i in range(len(table)):
        for j in range(len(table[i])):
            keep = table[i][j]
            table[i][j] = keep + step
            up = loss()
            table[i][j] = keep - step
            down = loss()
            table[i][j] = keep
            numeric = (up - down) / (2 * step)
            assert abs(result.grad_logits[i, j] - numeric) <= 1e-6


def test_package_fd_helper_agrees():
    for seed in range(10):
        logits, targets, mask = random_case(100 + seed)
        result = mim_loss(logits, targets, mask)
        numeric = mim_fd_grads(logits, targets, mask)
        scale = max(1.0, float(np.abs(result.grad_logits).max()))
        assert float(np.abs(result.grad_logits - numeric).max()) <= 1e-4 * scale


# ----------------------------------------------------------- cls-token head


def test_cls_logits_concatenation_semantics():
    rng = np.random.default_rng(7)
    d, k = 4, 3
    cls_vec = rng.standard_normal(d)
    h_rows = rng.standard_normal((6, d))
    mask = make_mask(6, 0.5, rng)
    weights = rng.standard_normal((2 * d, k))
    bias = rng.standard_normal(k)
    out = cls_logits(cls_vec, h_rows, mask, weights, bias)
    assert out.shape == (mask.count, k)
    for row, patch in enumerate(mask.masked_indices):
        joined = np.concatenate([cls_vec, h_rows[patch]])
        # batched and single-row matmuls may sum in different orders
        np.testing.assert_allclose(out[row], joined @ weights + bias,
                                   atol=1e-12, rtol=0)


def test_cls_logits_empty_mask_and_validation():
    rng = np.random.default_rng(8)
    d, k = 4, 3
    cls_vec = rng.standard_normal(d)
    h_rows = rng.standard_normal((5, d))
    empty = MaskSpec(masked_indices=(), ratio=0.0, n=5)
    out = cls_logits(cls_vec, h_rows, empty, rng.standard_normal((2 * d, k)),
                     np.zeros(k))
    assert out.shape == (0, k)
    mask = make_mask(5, 0.4, rng)
    with pytest.raises(NumericsError):
        cls_logits(cls_vec[:-1], h_rows, mask,
                   rng.standard_normal((2 * d, k)), np.zeros(k))
    with pytest.raises(NumericsError):
        cls_logits(cls_vec, h_rows, mask,
                   rng.standard_normal((d, k)), np.zeros(k))


# ------------------------------------------------------------- total, drift


def test_total_loss_sums_and_rejects_nonfinite():
    assert total_loss(1.5, 2.25) == 3.75
    with pytest.raises(NumericsError):
        total_loss(float("nan"), 1.0)
    with pytest.raises(NumericsError):
        total_loss(1.0, float("inf"))


def test_descent_check_reduces_loss():
    for seed in range(5):
        result = descent_check(seed)
        assert result.decreased
        assert result.final_loss < result.initial_loss
        assert math.isfinite(result.final_loss)
