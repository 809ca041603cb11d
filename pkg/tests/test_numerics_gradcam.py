"""Patch relevance maps: gradients, normalization, and the occlusion oracle."""

import numpy as np
import pytest

from facewatch.errors import NumericsError
from facewatch.numerics import (
    CamMap,
    LinearHead,
    class_score,
    grad_cam,
    grad_wrt_patch_embeddings,
    occlusion_drops,
    random_encoder,
    tail_forward,
    vit_forward_with_cut,
)
from facewatch.numerics.selfcheck import planted_trial
from facewatch.numerics.serialize import (
    encoder_from_json,
    fixtures_dir,
    head_from_json,
    load_json,
)


@pytest.fixture(scope="module")
def planted():
    doc = load_json(fixtures_dir() / "gradcam_planted.json")
    return (encoder_from_json(doc["encoder"]), head_from_json(doc["head"]),
            np.asarray(doc["patches"]), doc)


def random_head(rng, n, d_enc, classes=2):
    return LinearHead(patch_weights=rng.standard_normal((classes, n, d_enc)),
                      cls_weights=rng.standard_normal((classes, d_enc)),
                      bias=rng.standard_normal(classes))


# ----------------------------------------------------------- frozen fixture


def test_planted_fixture_reproduces(planted):
    enc, head, patches, doc = planted
    cam = grad_cam(enc, head, patches, 0)
    assert int(np.argmax(cam.map)) == doc["expected_argmax"]
    np.testing.assert_allclose(cam.map, doc["expected_map"], atol=1e-9, rtol=0)


def test_map_is_normalized_and_non_negative(planted):
    enc, head, patches, _ = planted
    cam = grad_cam(enc, head, patches, 0)
    assert np.all(cam.map >= 0.0)
    assert np.all(cam.map <= 1.0)
    assert cam.map.max() == 1.0
    assert cam.map.min() == 0.0


def test_fixture_argmax_agrees_with_occlusion(planted):
    enc, head, patches, doc = planted
    drops = occlusion_drops(enc, head, patches, 0)
    assert int(np.argmax(drops)) == doc["expected_argmax"]


# ------------------------------------------------------------ the gradients


def test_analytic_gradient_matches_fd_method():
    rng = np.random.default_rng(1)
    for n_layers in (0, 1, 2):
        enc = random_encoder(p=2, d_enc=6, n_layers=n_layers, seed=n_layers)
        patches = rng.random((4, 12))
        head = random_head(rng, 4, 6)
        analytic = grad_wrt_patch_embeddings(enc, head, patches, 1)
        numeric = grad_wrt_patch_embeddings(enc, head, patches, 1, method="fd")
        scale = max(1.0, float(np.abs(analytic).max()))
        assert float(np.abs(analytic - numeric).max()) <= 1e-6 * scale


def test_analytic_gradient_matches_in_test_differences():
    rng = np.random.default_rng(2)
    enc = random_encoder(p=2, d_enc=5, n_layers=2, seed=8)
    patches = rng.random((4, 12))
    head = random_head(rng, 4, 5)
    analytic = grad_wrt_patch_embeddings(enc, head, patches, 0)
    cut = vit_forward_with_cut(patches, enc)

    def score(tokens):
        h_rows, cls_vec = tail_forward(tokens, enc)
        return float(class_score(h_rows, cls_vec, head)[0])

    step = 1e-5
    for p in range(4):
        for j in range(5):
            bumped = cut.copy()
            bumped[p + 1, j] += step
            up = score(bumped)
            bumped[p + 1, j] -= 2 * step
            down = score(bumped)
            numeric = (up - down) / (2 * step)
            assert abs(analytic[p, j] - numeric) <= 1e-6


def test_zero_layer_gradient_is_the_head_row():
    # with no attention the cut rows feed the head directly
    rng = np.random.default_rng(3)
    enc = random_encoder(p=2, d_enc=6, n_layers=0, seed=4)
    patches = rng.random((4, 12))
    head = random_head(rng, 4, 6)
    grad = grad_wrt_patch_embeddings(enc, head, patches, 1)
    np.testing.assert_array_equal(grad, head.patch_weights[1])


def test_cls_only_head_gives_zero_patch_gradient_at_depth_zero():
    rng = np.random.default_rng(4)
    enc = random_encoder(p=2, d_enc=6, n_layers=0, seed=5)
    patches = rng.random((4, 12))
    head = LinearHead(patch_weights=np.zeros((1, 4, 6)),
                      cls_weights=rng.standard_normal((1, 6)),
                      bias=np.zeros(1))
    grad = grad_wrt_patch_embeddings(enc, head, patches, 0)
    np.testing.assert_array_equal(grad, np.zeros((4, 6)))
    cam = grad_cam(enc, head, patches, 0)
    np.testing.assert_array_equal(cam.map, np.zeros(4))


# -------------------------------------------------------- map construction


def test_positive_rescale_leaves_map_unchanged():
    rng = np.random.default_rng(5)
    enc = random_encoder(p=2, d_enc=6, n_layers=1, seed=6)
    patches = rng.random((4, 12))
    head = random_head(rng, 4, 6)
    scaled = LinearHead(patch_weights=3.0 * head.patch_weights,
                        cls_weights=3.0 * head.cls_weights,
                        bias=3.0 * head.bias)
    base = grad_cam(enc, head, patches, 0)
    rescaled = grad_cam(enc, scaled, patches, 0)
    np.testing.assert_allclose(rescaled.map, base.map, atol=1e-12)


def test_map_formula_from_parts():
    rng = np.random.default_rng(6)
    enc = random_encoder(p=2, d_enc=6, n_layers=1, seed=7)
    patches = rng.random((4, 12))
    head = random_head(rng, 4, 6)
    cam = grad_cam(enc, head, patches, 0)
    grad = grad_wrt_patch_embeddings(enc, head, patches, 0)
    cut = vit_forward_with_cut(patches, enc)
    alpha = grad.sum(axis=1) / 4  # pooled over patches, not channels
    raw = np.maximum(alpha * cut[1:].sum(axis=1), 0.0)
    if raw.max() > raw.min():
        raw = (raw - raw.min()) / (raw.max() - raw.min())
    np.testing.assert_allclose(cam.map, raw, atol=1e-12)
    np.testing.assert_allclose(cam.weights, alpha, atol=1e-12)


def test_cam_map_rejects_negative_values():
    with pytest.raises(NumericsError):
        CamMap(weights=np.zeros(2), map=np.array([0.5, -0.1]))


def test_class_index_validation():
    rng = np.random.default_rng(7)
    enc = random_encoder(p=2, d_enc=6, n_layers=1, seed=9)
    patches = rng.random((4, 12))
    head = random_head(rng, 4, 6)
    with pytest.raises(NumericsError):
        grad_cam(enc, head, patches, 2)
    with pytest.raises(NumericsError):
        occlusion_drops(enc, head, patches, -1)
    with pytest.raises(NumericsError):
        grad_wrt_patch_embeddings(enc, head, patches, 0, method="sideways")


def test_head_patch_count_must_match_encoder():
    rng = np.random.default_rng(8)
    enc = random_encoder(p=2, d_enc=6, n_layers=1, seed=10)
    patches = rng.random((4, 12))
    head = random_head(rng, 5, 6)
    with pytest.raises(NumericsError):
        grad_cam(enc, head, patches, 0)


# -------------------------------------------------------- occlusion oracle


def test_occlusion_drop_is_score_difference():
    rng = np.random.default_rng(9)
    enc = random_encoder(p=2, d_enc=6, n_layers=1, seed=11)
    patches = rng.random((3, 12))
    head = random_head(rng, 3, 6)

    def score(rows):
        h_rows, cls_vec = tail_forward(vit_forward_with_cut(rows, enc), enc)
        return float(class_score(h_rows, cls_vec, head)[0])

    drops = occlusion_drops(enc, head, patches, 0)
    for p in range(3):
        occluded = patches.copy()
        occluded[p] = 0.0
        assert drops[p] == score(patches) - score(occluded)


def test_planted_trials_mostly_agree_with_occlusion():
    rng = np.random.default_rng(99)
    agreements = sum(planted_trial(rng, n_layers=1)[0] for _ in range(10))
    assert agreements >= 9
