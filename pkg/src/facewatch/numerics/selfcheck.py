"""Self-contained oracle suite over the numerics stack.

Each check recomputes an expected value through an independent route (brute
force, closed form, or finite differences) and compares. The CLI exposes the
suite as `numerics-check`; the exit code reflects the conjunction of all
checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import random_encoder, vit_forward, vit_forward_with_cut
from .gradcam import LinearHead, grad_cam, grad_wrt_patch_embeddings, occlusion_drops
from .mim import MaskSpec, descent_check, make_mask, mim_fd_grads, mim_loss, total_loss
from .patches import patchify, unpatchify
from .serialize import encoder_from_json, fixtures_dir, head_from_json, load_json
from .vqkd import (
    Codebook,
    TeacherTargets,
    quantize,
    random_codebook,
    vqkd_fd_grads,
    vqkd_loss,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def relative_error(candidate: np.ndarray, reference: np.ndarray) -> float:
    """Max absolute deviation scaled by the largest reference entry."""
    candidate = np.asarray(candidate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = max(float(np.max(np.abs(reference))), 1e-10)
    return float(np.max(np.abs(candidate - reference))) / scale


def random_vqkd_instance(rng: np.random.Generator, n: int = 4, d_enc: int = 8,
                         k: int = 8, code_dim: int = 4, margin: float = 1e-3):
    """Instance whose code assignments are stable under small perturbations.

    Rejection-samples until every patch's nearest code beats the runner-up by
    at least `margin` in squared distance, so finite-difference steps cannot
    flip an argmin.
    """
    for _ in range(200):
        cb = random_codebook(size=k, code_dim=code_dim, d_enc=d_enc,
                             seed=int(rng.integers(2 ** 31)))
        h_rows = rng.standard_normal((n, d_enc))
        ok = True
        for i in range(n):
            a = h_rows[i] @ cb.projection
            a = a / np.linalg.norm(a)
            b = cb.vectors / np.linalg.norm(cb.vectors, axis=1)[:, None]
            distances = np.sort(np.sum((b - a) ** 2, axis=1))
            if distances[1] - distances[0] < margin:
                ok = False
                break
        if ok:
            outputs = rng.standard_normal((n, 6))
            targets = TeacherTargets(targets=rng.standard_normal((n, 6)))
            return h_rows, outputs, targets, cb
    raise RuntimeError("could not sample a margin-stable instance")


def planted_trial(rng: np.random.Generator, n_layers: int,
                  plant_amplitude: float = 2.0) -> tuple[bool, int, int]:
    """One planted-feature trial: does the relevance argmax match occlusion?

    Plants an anomalously strong stimulus at one patch and pairs it with a
    matched-filter head: the single class reads the planted patch's encoder
    representation relative to the background mean, which is how a linear
    probe trained on the plant would end up. Instances are resampled until
    the rectified map can see the plant (positive summed activation and
    summed gradient there); the occlusion route never enters construction.
    Returns (agrees, cam argmax, drop argmax).
    """
    n, p, d_enc = 16, 2, 8
    for _ in range(100):
        enc = random_encoder(p=p, d_enc=d_enc, n_layers=n_layers,
                             seed=int(rng.integers(2 ** 31)))
        patch_rows = rng.random((n, p * p * 3))
        target = int(rng.integers(n))
        patch_rows[target] += plant_amplitude
        cut = vit_forward_with_cut(patch_rows, enc)
        h_rows, _ = vit_forward(patch_rows, enc)
        background = np.mean(np.delete(h_rows, target, axis=0), axis=0)
        direction = h_rows[target] - background
        norm = float(np.linalg.norm(direction))
        if norm < 1e-9:
            continue
        w = 3.0 * direction / norm
        patch_weights = np.zeros((1, n, d_enc))
        patch_weights[0, target] = w
        head = LinearHead(patch_weights=patch_weights,
                          cls_weights=np.zeros((1, d_enc)), bias=np.zeros(1))
        grad = grad_wrt_patch_embeddings(enc, head, patch_rows, 0)
        if float(cut[1 + target].sum()) <= 0 or float(grad[target].sum()) <= 0:
            continue
        cam = grad_cam(enc, head, patch_rows, 0)
        drops = occlusion_drops(enc, head, patch_rows, 0)
        return (int(np.argmax(cam.map)) == int(np.argmax(drops)),
                int(np.argmax(cam.map)), int(np.argmax(drops)))
    raise RuntimeError("could not construct a visible planted trial")


def _check_patch_roundtrip(rng) -> CheckResult:
    image = rng.random((32, 32, 3))
    rebuilt = unpatchify(patchify(image, 8))
    passed = np.array_equal(rebuilt, image)
    return CheckResult("patch_roundtrip", passed,
                       "bit-exact" if passed else "reassembly mismatch")


def _check_zero_layer_identity(rng) -> CheckResult:
    enc = random_encoder(p=4, d_enc=8, n_layers=0, seed=7)
    rows = rng.standard_normal((6, 48))
    h_rows, cls_vec = vit_forward(rows, enc)
    passed = (np.allclose(h_rows, rows @ enc.patch_projection, atol=0, rtol=0)
              and np.array_equal(cls_vec, enc.cls_token))
    return CheckResult("zero_layer_identity", passed)


def _check_encoder_fixture(_rng) -> CheckResult:
    data = load_json(fixtures_dir() / "attention_small.json")
    enc = encoder_from_json(data["encoder"])
    h_rows, cls_vec = vit_forward(np.asarray(data["patches"]), enc)
    err = max(relative_error(h_rows, np.asarray(data["expected_h"])),
              relative_error(cls_vec, np.asarray(data["expected_cls"])))
    return CheckResult("encoder_fixture", err <= 1e-9, f"max rel err {err:.3e}")


def _check_quantize_bruteforce(rng) -> CheckResult:
    for _ in range(200):
        k = int(rng.integers(2, 65))
        d_enc = int(rng.integers(4, 13))
        code_dim = int(rng.integers(2, min(d_enc, 8) + 1))
        cb = random_codebook(size=k, code_dim=code_dim, d_enc=d_enc,
                             seed=int(rng.integers(2 ** 31)))
        h = rng.standard_normal(d_enc)
        z, _ = quantize(h, cb)
        a = h @ cb.projection
        a = a / math.sqrt(float(a @ a))
        best_index, best_distance = -1, float("inf")
        for j in range(k):
            b = cb.vectors[j] / math.sqrt(float(cb.vectors[j] @ cb.vectors[j]))
            distance = float(np.sum((a - b) ** 2))
            if distance < best_distance:
                best_index, best_distance = j, distance
        if z != best_index:
            return CheckResult("quantize_bruteforce", False,
                               f"got {z}, brute force {best_index}")
    return CheckResult("quantize_bruteforce", True, "200 instances exact")


def _check_vqkd_gradients(rng) -> CheckResult:
    worst = 0.0
    for _ in range(3):
        h_rows, outputs, targets, cb = random_vqkd_instance(rng)
        result = vqkd_loss(h_rows, outputs, targets, cb)
        fd_h, fd_v, fd_o = vqkd_fd_grads(h_rows, outputs, targets, cb)
        worst = max(worst, relative_error(result.grad_h, fd_h),
                    relative_error(result.grad_codebook, fd_v),
                    relative_error(result.grad_output, fd_o))
    return CheckResult("vqkd_gradients", worst <= 1e-4, f"max rel err {worst:.3e}")


def _check_stop_gradient(rng) -> CheckResult:
    h_rows, outputs, targets, cb = random_vqkd_instance(rng)
    base = vqkd_loss(h_rows, outputs, targets, cb)
    step = 1e-4
    stopped_drift = 0.0
    live_moves = True
    for i in range(h_rows.shape[0]):
        z = int(base.assignments[i])
        a0, b0 = base.normalized_h[i], base.normalized_codes[i]
        base_value = float(np.sum((a0 - b0) ** 2))

        # nudge the selected code row: the term that stops gradients at the
        # code must not move, while its live counterpart must
        v_moved = cb.vectors[z] + step * rng.standard_normal(cb.code_dim)
        b_live = v_moved / np.linalg.norm(v_moved)
        stopped = float(np.sum((a0 - b0) ** 2))
        live = float(np.sum((a0 - b_live) ** 2))
        stopped_drift = max(stopped_drift, abs(stopped - base_value))
        live_moves = live_moves and live != base_value

        # nudge the embedding: the code-side term freezes the embedding
        # buffer, so only the live version may move
        h_moved = h_rows[i] + step * rng.standard_normal(h_rows.shape[1])
        a_live = h_moved @ cb.projection
        a_live = a_live / np.linalg.norm(a_live)
        stopped = float(np.sum((a0 - b0) ** 2))
        live = float(np.sum((a_live - b0) ** 2))
        stopped_drift = max(stopped_drift, abs(stopped - base_value))
        live_moves = live_moves and live != base_value
    passed = stopped_drift == 0.0 and live_moves
    return CheckResult("stop_gradient_probes", passed,
                       f"stopped drift {stopped_drift:.3e}, live terms move: {live_moves}")


def _check_mim(rng) -> CheckResult:
    mask = MaskSpec(masked_indices=(0, 2, 4), ratio=0.6, n=5)
    targets = np.array([1, 0, 3, 0, 2])
    uniform = mim_loss(np.zeros((3, 5)), targets, mask)
    if abs(uniform.loss - 3 * math.log(5)) > 1e-12:
        return CheckResult("mim_loss", False, "uniform-logits value off")
    logits = rng.standard_normal((3, 5))
    result = mim_loss(logits, targets, mask)
    err = relative_error(result.grad_logits, mim_fd_grads(logits, targets, mask))
    return CheckResult("mim_loss", err <= 1e-6, f"grad rel err {err:.3e}")


def _check_total_loss(rng) -> CheckResult:
    a, b = float(rng.random()), float(rng.random())
    passed = total_loss(a, b) == a + b and total_loss(a, 0.0) == a
    return CheckResult("total_loss", passed)


def _check_cam_fixture(_rng) -> CheckResult:
    data = load_json(fixtures_dir() / "gradcam_planted.json")
    enc = encoder_from_json(data["encoder"])
    head = head_from_json(data["head"])
    cam = grad_cam(enc, head, np.asarray(data["patches"]), 0)
    expected = int(data["expected_argmax"])
    got = int(np.argmax(cam.map))
    err = relative_error(cam.map, np.asarray(data["expected_map"]))
    passed = got == expected and err <= 1e-9 and bool(np.all(cam.map >= 0))
    return CheckResult("gradcam_fixture", passed,
                       f"argmax {got} (want {expected}), map rel err {err:.3e}")


def _check_gradcam_methods(rng) -> CheckResult:
    enc = random_encoder(p=2, d_enc=6, n_layers=1, seed=21)
    rows = rng.standard_normal((4, 12))
    head = LinearHead(patch_weights=rng.standard_normal((2, 4, 6)),
                      cls_weights=rng.standard_normal((2, 6)),
                      bias=np.zeros(2))
    analytic = grad_wrt_patch_embeddings(enc, head, rows, 1, method="analytic")
    fd = grad_wrt_patch_embeddings(enc, head, rows, 1, method="fd")
    err = relative_error(analytic, fd)
    return CheckResult("gradcam_gradients", err <= 1e-4, f"rel err {err:.3e}")


def _check_occlusion(rng) -> CheckResult:
    agreements = 0
    for trial in range(5):
        agrees, _, _ = planted_trial(rng, n_layers=trial % 2)
        agreements += int(agrees)
    return CheckResult("occlusion_agreement", agreements >= 4, f"{agreements}/5 trials")


def _check_descent(_rng) -> CheckResult:
    results = [descent_check(seed) for seed in (11, 12, 13)]
    passed = all(r.decreased for r in results)
    detail = ", ".join(f"{r.initial_loss:.3f}->{r.final_loss:.3f}" for r in results)
    return CheckResult("descent", passed, detail)


_CHECKS = (
    _check_patch_roundtrip,
    _check_zero_layer_identity,
    _check_encoder_fixture,
    _check_quantize_bruteforce,
    _check_vqkd_gradients,
    _check_stop_gradient,
    _check_mim,
    _check_total_loss,
    _check_cam_fixture,
    _check_gradcam_methods,
    _check_occlusion,
    _check_descent,
)


def run_selfcheck(seed: int = 2026) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for check in _CHECKS:
        try:
            results.append(check(rng))
        except Exception as exc:  # a crashed check is a failed check
            results.append(CheckResult(check.__name__.lstrip("_"), False, repr(exc)))
    return results
