"""Masked-patch prediction losses over discrete code targets.

A mask selects round(ratio*n) patch positions. The prediction loss is the
summed cross-entropy between per-masked-patch K-way logits and the code index
each patch quantized to; unmasked patches contribute nothing. A second head
predicts the same masked targets from the class token concatenated with the
patch embedding, and the training objective is the plain sum of the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import NumericsError


@dataclass(frozen=True)
class MaskSpec:
    masked_indices: tuple[int, ...]  # sorted, unique positions in [0, n)
    ratio: float
    n: int

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise NumericsError(f"mask ratio must be in [0, 1], got {self.ratio}")
        if self.n <= 0:
            raise NumericsError(f"patch count must be positive, got {self.n}")
        indices = tuple(int(i) for i in self.masked_indices)
        object.__setattr__(self, "masked_indices", indices)
        if sorted(set(indices)) != list(indices):
            raise NumericsError("masked indices must be sorted and unique")
        if indices and (indices[0] < 0 or indices[-1] >= self.n):
            raise NumericsError(f"masked indices out of range [0, {self.n})")
        if len(indices) != round(self.ratio * self.n):
            raise NumericsError(
                f"|M| = {len(indices)} but round(ratio*n) = {round(self.ratio * self.n)}"
            )

    @property
    def count(self) -> int:
        return len(self.masked_indices)


def make_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    size = round(ratio * n)
    chosen = rng.choice(n, size=size, replace=False)
    return MaskSpec(masked_indices=tuple(sorted(int(i) for i in chosen)),
                    ratio=ratio, n=n)


@dataclass(frozen=True)
class MimResult:
    loss: float
    grad_logits: np.ndarray  # |M| x K, softmax - one_hot per masked row


def mim_loss(logits: np.ndarray, targets: np.ndarray, mask: MaskSpec) -> MimResult:
    """Summed cross-entropy over masked positions.

    logits rows align with mask.masked_indices; targets holds a code index for
    every patch position and is read only at masked ones.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != mask.count:
        raise NumericsError(
            f"logits shape {logits.shape}, expected ({mask.count}, K)"
        )
    if targets.shape != (mask.n,):
        raise NumericsError(f"targets shape {targets.shape}, expected ({mask.n},)")
    k = logits.shape[1]
    loss = 0.0
    grad = np.empty_like(logits)
    for row, patch_index in enumerate(mask.masked_indices):
        target = int(targets[patch_index])
        if target < 0 or target >= k:
            raise NumericsError(
                f"target index {target} out of range for K={k} at patch {patch_index}"
            )
        scores = logits[row]
        shift = scores - scores.max()
        log_norm = math.log(float(np.exp(shift).sum()))
        loss += log_norm - float(shift[target])
        softmax = np.exp(shift - log_norm)
        grad[row] = softmax
        grad[row, target] -= 1.0
    return MimResult(loss=loss, grad_logits=grad)


def mim_fd_grads(logits: np.ndarray, targets: np.ndarray, mask: MaskSpec,
                 step: float = 1e-5) -> np.ndarray:
    """Central finite differences of mim_loss wrt the logits."""
    logits = np.asarray(logits, dtype=np.float64).copy()
    grad = np.zeros_like(logits)
    flat = logits.reshape(-1)
    grad_flat = grad.reshape(-1)
    for index in range(flat.size):
        saved = flat[index]
        flat[index] = saved + step
        plus = mim_loss(logits, targets, mask).loss
        flat[index] = saved - step
        minus = mim_loss(logits, targets, mask).loss
        flat[index] = saved
        grad_flat[index] = (plus - minus) / (2.0 * step)
    return grad


def cls_logits(cls_vec: np.ndarray, h_rows: np.ndarray, mask: MaskSpec,
               weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Logits for the class-token head: input is [cls ; h_i] per masked patch."""
    cls_vec = np.asarray(cls_vec, dtype=np.float64)
    h_rows = np.asarray(h_rows, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    d = h_rows.shape[1]
    if cls_vec.shape != (d,):
        raise NumericsError(f"cls shape {cls_vec.shape}, expected ({d},)")
    if weights.shape[0] != 2 * d:
        raise NumericsError(
            f"cls head expects input width {2 * d}, weights give {weights.shape[0]}"
        )
    rows = np.array([np.concatenate([cls_vec, h_rows[i]])
                     for i in mask.masked_indices])
    if rows.size == 0:
        return np.zeros((0, weights.shape[1]))
    return rows @ weights + bias


def total_loss(mim: float, cls: float) -> float:
    if not (math.isfinite(mim) and math.isfinite(cls)):
        raise NumericsError(f"loss terms must be finite, got {mim}, {cls}")
    return mim + cls


@dataclass(frozen=True)
class DescentResult:
    initial_loss: float
    final_loss: float
    decreased: bool
    steps: int


def descent_check(seed: int, steps: int = 200, lr: float = 1e-2) -> DescentResult:
    """Gradient-descent sanity check of the loss plumbing.

    Builds a seeded toy instance (random image through a frozen random
    encoder, codes from a random codebook) and trains only the two prediction
    heads by plain gradient descent. The objective is convex in the head
    weights, so the loss must drop; this checks gradient wiring, not model
    quality.
    """
    from .encoder import random_encoder, vit_forward
    from .vqkd import quantize_rows, random_codebook

    rng = np.random.default_rng(seed)
    p, d_enc, k = 8, 32, 32
    patches = rng.random((16, p * p * 3))
    enc = random_encoder(p=p, d_enc=d_enc, n_layers=2, seed=seed)
    h_rows, cls_vec = vit_forward(patches, enc)
    cb = random_codebook(size=k, code_dim=8, d_enc=d_enc, seed=seed + 1)
    targets, _ = quantize_rows(h_rows, cb)
    mask = make_mask(n=16, ratio=0.4, rng=rng)

    w_mim = 0.01 * rng.standard_normal((d_enc, k))
    b_mim = np.zeros(k)
    w_cls = 0.01 * rng.standard_normal((2 * d_enc, k))
    b_cls = np.zeros(k)
    x_mim = h_rows[list(mask.masked_indices)]
    x_cls = np.array([np.concatenate([cls_vec, h_rows[i]])
                      for i in mask.masked_indices])

    def objective_and_grads():
        mim = mim_loss(x_mim @ w_mim + b_mim, targets, mask)
        cls = mim_loss(x_cls @ w_cls + b_cls, targets, mask)
        value = total_loss(mim.loss, cls.loss)
        return value, (x_mim.T @ mim.grad_logits, mim.grad_logits.sum(axis=0),
                       x_cls.T @ cls.grad_logits, cls.grad_logits.sum(axis=0))

    initial, _ = objective_and_grads()
    final = initial
    for _ in range(steps):
        final, (g_wm, g_bm, g_wc, g_bc) = objective_and_grads()
        w_mim -= lr * g_wm
        b_mim -= lr * g_bm
        w_cls -= lr * g_wc
        b_cls -= lr * g_bc
    final, _ = objective_and_grads()
    return DescentResult(initial_loss=initial, final_loss=final,
                         decreased=final < initial, steps=steps)
