"""Vector quantization of patch embeddings and the distillation loss.

Patch embeddings are projected into code space, l2-normalized, and matched to
the nearest l2-normalized codebook row (ties break to the smallest index).
The training loss per patch combines a negated output/target cosine with two
commitment regularizers that differ only in where the stop-gradient sits:

    loss_i = -cos(o_i, t_i)
             + || sg[a_i] - b_i ||^2      (gradient reaches codebook rows only)
             + || a_i - sg[b_i] ||^2      (gradient reaches patch embeddings only)

with a_i the normalized projected embedding and b_i the normalized selected
code. The two regularizers share one forward value, so gradients are derived
analytically per term; the finite-difference oracle freezes the sg buffers and
the code assignments at the base point so it differentiates the same
functional the analytic path does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import NumericsError
from .encoder import TransformerLayer
from .patches import PatchSet

NORM_FLOOR = 1e-12


@dataclass
class Codebook:
    vectors: np.ndarray  # K x D
    projection: np.ndarray  # d_enc x D

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise NumericsError("codebook needs at least 2 rows")
        if self.projection.ndim != 2 or self.projection.shape[1] != self.vectors.shape[1]:
            raise NumericsError(
                f"projection shape {self.projection.shape} does not map into "
                f"code dimension {self.vectors.shape[1]}"
            )
        if not np.all(np.isfinite(self.vectors)) or not np.all(np.isfinite(self.projection)):
            raise NumericsError("codebook weights must be finite")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms < NORM_FLOOR):
            raise NumericsError("codebook rows must be nonzero (normalized lookup)")
        normalized = self.vectors / norms[:, None]
        for i in range(normalized.shape[0]):
            for j in range(i + 1, normalized.shape[0]):
                if np.array_equal(normalized[i], normalized[j]):
                    raise NumericsError(
                        f"codebook rows {i} and {j} are identical after normalization"
                    )

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def code_dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class TeacherTargets:
    """Per-patch semantic target vectors for the distillation term."""

    targets: np.ndarray  # n x d_t

    def __post_init__(self):
        object.__setattr__(self, "targets",
                           np.asarray(self.targets, dtype=np.float64))
        if self.targets.ndim != 2:
            raise NumericsError("targets must be an n x d_t matrix")
        if not np.all(np.isfinite(self.targets)):
            raise NumericsError("targets must be finite")


def random_codebook(size: int, code_dim: int, d_enc: int, seed: int = 0) -> Codebook:
    """Gaussian rows plus a seeded random orthonormal-column projection."""
    if d_enc < code_dim:
        raise NumericsError(
            f"orthonormal-column projection needs d_enc >= code_dim, got {d_enc} < {code_dim}"
        )
    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((size, code_dim))
    q, _ = np.linalg.qr(rng.standard_normal((d_enc, code_dim)))
    return Codebook(vectors=vectors, projection=q)


def teacher_targets(patches: PatchSet | np.ndarray, d_t: int, seed: int = 0) -> TeacherTargets:
    """Synthetic semantic targets: a fixed seeded linear map of raw patches."""
    matrix = patches.patches if isinstance(patches, PatchSet) else np.asarray(patches, dtype=np.float64)
    rng = np.random.default_rng(seed)
    flat = matrix.shape[1]
    w = rng.standard_normal((flat, d_t)) / math.sqrt(flat)
    return TeacherTargets(targets=matrix @ w)


def _normalize(vector: np.ndarray, what: str) -> np.ndarray:
    norm = np.linalg.norm(vector)
    if norm < NORM_FLOOR:
        raise NumericsError(f"cannot l2-normalize a zero {what} vector")
    return vector / norm


def quantize(h: np.ndarray, cb: Codebook) -> tuple[int, np.ndarray]:
    """Nearest-code lookup for one embedding; returns (index, unnormalized row).

    Distance is measured between l2-normalized vectors; exact ties go to the
    smallest index.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (cb.projection.shape[0],):
        raise NumericsError(
            f"embedding shape {h.shape}, expected ({cb.projection.shape[0]},)"
        )
    if not np.all(np.isfinite(h)):
        raise NumericsError("embedding must be finite")
    a = _normalize(h @ cb.projection, "projected embedding")
    b = cb.vectors / np.linalg.norm(cb.vectors, axis=1)[:, None]
    distances = np.sum((b - a) ** 2, axis=1)
    index = int(np.argmin(distances))  # first minimum = smallest index
    return index, cb.vectors[index].copy()


def quantize_rows(h_rows: np.ndarray, cb: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """quantize applied row-wise; returns (indices, selected rows)."""
    h_rows = np.asarray(h_rows, dtype=np.float64)
    indices = np.empty(h_rows.shape[0], dtype=np.int64)
    codes = np.empty((h_rows.shape[0], cb.code_dim), dtype=np.float64)
    for i in range(h_rows.shape[0]):
        indices[i], codes[i] = quantize(h_rows[i], cb)
    return indices, codes


@dataclass(frozen=True)
class VqkdResult:
    loss: float
    cosine_term: float  # sum of -cos(o_i, t_i)
    regularizer_term: float  # shared forward value of each sg regularizer
    assignments: np.ndarray  # n, selected code indices
    normalized_h: np.ndarray  # n x D, the a_i (sg buffer for the code-side term)
    normalized_codes: np.ndarray  # n x D, the b_i (sg buffer for the embedding-side term)
    grad_h: np.ndarray  # n x d_enc
    grad_codebook: np.ndarray  # K x D
    grad_output: np.ndarray  # n x d_t
    grad_projection: np.ndarray  # d_enc x D


def vqkd_loss(h_rows: np.ndarray, outputs: np.ndarray, targets: TeacherTargets,
              cb: Codebook) -> VqkdResult:
    """Loss and its gradient set under stop-gradient semantics.

    grad_codebook comes only from the sg[a]-vs-code term; grad_h (and
    grad_projection) only from the embedding-vs-sg[b] term; grad_output only
    from the cosine term.
    """
    h_rows = np.asarray(h_rows, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64)
    t_rows = targets.targets
    n = h_rows.shape[0]
    if outputs.shape != t_rows.shape or outputs.shape[0] != n:
        raise NumericsError(
            f"outputs {outputs.shape}, targets {t_rows.shape}, embeddings rows {n} inconsistent"
        )

    assignments = np.empty(n, dtype=np.int64)
    a_rows = np.empty((n, cb.code_dim))
    b_rows = np.empty((n, cb.code_dim))
    grad_h = np.zeros_like(h_rows)
    grad_codebook = np.zeros_like(cb.vectors)
    grad_output = np.zeros_like(outputs)
    grad_projection = np.zeros_like(cb.projection)

    cosine_term = 0.0
    regularizer_term = 0.0
    for i in range(n):
        o, t = outputs[i], t_rows[i]
        o_norm, t_norm = np.linalg.norm(o), np.linalg.norm(t)
        if o_norm < NORM_FLOOR or t_norm < NORM_FLOOR:
            raise NumericsError(f"zero vector in cosine at patch {i}")
        cos = float(o @ t) / (o_norm * t_norm)
        cosine_term -= cos
        grad_output[i] = -(t / (o_norm * t_norm) - cos * o / (o_norm * o_norm))

        z, v = quantize(h_rows[i], cb)
        assignments[i] = z
        h_hat = h_rows[i] @ cb.projection
        h_hat_norm = np.linalg.norm(h_hat)
        v_norm = np.linalg.norm(v)
        a = h_hat / h_hat_norm
        b = v / v_norm
        a_rows[i], b_rows[i] = a, b
        diff = a - b
        regularizer_term += float(diff @ diff)

        # code-side term: gradient through b = v/|v| with a frozen
        grad_codebook[z] += -2.0 / v_norm * (diff - b * float(b @ diff))
        # embedding-side term: gradient through a = h_hat/|h_hat| with b frozen
        grad_h_hat = 2.0 / h_hat_norm * (diff - a * float(a @ diff))
        grad_h[i] = grad_h_hat @ cb.projection.T
        grad_projection += np.outer(h_rows[i], grad_h_hat)

    loss = cosine_term + 2.0 * regularizer_term
    return VqkdResult(
        loss=loss,
        cosine_term=cosine_term,
        regularizer_term=regularizer_term,
        assignments=assignments,
        normalized_h=a_rows,
        normalized_codes=b_rows,
        grad_h=grad_h,
        grad_codebook=grad_codebook,
        grad_output=grad_output,
        grad_projection=grad_projection,
    )


def vqkd_fd_grads(h_rows: np.ndarray, outputs: np.ndarray, targets: TeacherTargets,
                  cb: Codebook, step: float = 1e-5,
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central finite differences of the loss, respecting stop-gradients.

    The code assignments and both sg buffers are frozen at the base point, so
    the differentiated functional matches the one whose analytic gradients
    vqkd_loss reports. Returns (grad_h, grad_codebook, grad_output).
    """
    h_rows = np.asarray(h_rows, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64)
    base = vqkd_loss(h_rows, outputs, targets, cb)
    z0 = base.assignments
    a0 = base.normalized_h
    b0 = base.normalized_codes
    t_rows = targets.targets

    def frozen_loss(h_eval: np.ndarray, v_eval: np.ndarray, o_eval: np.ndarray) -> float:
        total = 0.0
        for i in range(h_rows.shape[0]):
            o, t = o_eval[i], t_rows[i]
            total -= float(o @ t) / (np.linalg.norm(o) * np.linalg.norm(t))
            b = _normalize(v_eval[z0[i]], "code")
            total += float(np.sum((a0[i] - b) ** 2))
            a = _normalize(h_eval[i] @ cb.projection, "projected embedding")
            total += float(np.sum((a - b0[i]) ** 2))
        return total

    def central(array: np.ndarray, evaluate) -> np.ndarray:
        grad = np.zeros_like(array)
        flat = array.reshape(-1)
        grad_flat = grad.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + step
            plus = evaluate()
            flat[k] = saved - step
            minus = evaluate()
            flat[k] = saved
            grad_flat[k] = (plus - minus) / (2.0 * step)
        return grad

    h_work = h_rows.copy()
    v_work = cb.vectors.copy()
    o_work = outputs.copy()
    evaluate = lambda: frozen_loss(h_work, v_work, o_work)
    return (central(h_work, evaluate), central(v_work, evaluate),
            central(o_work, evaluate))


@dataclass
class DecoderState:
    """Tiny decoder from selected codes to target space: transformer blocks of
    width D followed by a linear output map."""

    layers: list[TransformerLayer]
    output_weights: np.ndarray  # D x d_t
    output_bias: np.ndarray  # d_t

    def __post_init__(self):
        self.output_weights = np.asarray(self.output_weights, dtype=np.float64)
        self.output_bias = np.asarray(self.output_bias, dtype=np.float64)
        if self.output_weights.ndim != 2:
            raise NumericsError("decoder output_weights must be a matrix")
        if self.output_bias.shape != (self.output_weights.shape[1],):
            raise NumericsError("decoder output_bias shape mismatch")
        for layer in self.layers:
            if layer.width != self.output_weights.shape[0]:
                raise NumericsError("decoder layer width must equal code dimension")


def random_decoder(code_dim: int, d_t: int, seed: int = 0, n_layers: int = 1) -> DecoderState:
    rng = np.random.default_rng(seed)

    def mat(rows, cols):
        return rng.standard_normal((rows, cols)) / math.sqrt(rows)

    layers = []
    for _ in range(n_layers):
        layers.append(TransformerLayer(
            ln1_gamma=np.ones(code_dim), ln1_beta=np.zeros(code_dim),
            w_q=mat(code_dim, code_dim), b_q=np.zeros(code_dim),
            w_k=mat(code_dim, code_dim), b_k=np.zeros(code_dim),
            w_v=mat(code_dim, code_dim), b_v=np.zeros(code_dim),
            w_o=mat(code_dim, code_dim), b_o=np.zeros(code_dim),
            ln2_gamma=np.ones(code_dim), ln2_beta=np.zeros(code_dim),
            w_ff1=mat(code_dim, 2 * code_dim), b_ff1=np.zeros(2 * code_dim),
            w_ff2=mat(2 * code_dim, code_dim), b_ff2=np.zeros(code_dim),
        ))
    return DecoderState(layers=layers, output_weights=mat(code_dim, d_t),
                        output_bias=np.zeros(d_t))


def decode(codes: np.ndarray, dec: DecoderState) -> np.ndarray:
    """Map selected code rows to per-patch output vectors o_i."""
    from .encoder import _attention_sublayer, _ffn_sublayer

    tokens = np.asarray(codes, dtype=np.float64)
    for layer in dec.layers:
        tokens = _ffn_sublayer(_attention_sublayer(tokens, layer), layer)
    return tokens @ dec.output_weights + dec.output_bias
