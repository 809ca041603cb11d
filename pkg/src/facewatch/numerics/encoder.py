"""A small pre-norm transformer encoder over patch tokens.

Layout: a learned linear projection lifts each flattened patch to width d_enc,
a class token is prepended, optional positional embeddings are added, then L
identical blocks run: x += Attention(LN(x)); x += FFN(LN(x)). Attention is a
single softmax head; the FFN uses the exact-erf GELU. No normalization is
applied after the last block, so a zero-layer encoder returns the linear patch
projection unchanged.

The forward pass can be split at the "cut": the token activations right after
the final attention sublayer (residual included). Relevance mapping needs
gradients of a class score with respect to those activations, so the remainder
of the network (the last FFN sublayer) is exposed as tail_forward with a
matching analytic backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericsError
from .patches import PatchSet

LAYER_NORM_EPS = 1e-6

_erf = np.vectorize(math.erf)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def gelu_prime(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mean) / np.sqrt(var + LAYER_NORM_EPS) + beta


def _layer_norm_backward(grad_out: np.ndarray, x: np.ndarray,
                         gamma: np.ndarray) -> np.ndarray:
    """Gradient wrt x of layer_norm, per token (last axis)."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + LAYER_NORM_EPS)
    z = (x - mean) / sigma
    gz = grad_out * gamma
    return (gz - gz.mean(axis=-1, keepdims=True)
            - z * (gz * z).mean(axis=-1, keepdims=True)) / sigma


def _require_finite(name: str, array: np.ndarray):
    if not np.all(np.isfinite(array)):
        raise NumericsError(f"{name} contains non-finite values")


@dataclass
class TransformerLayer:
    """Weights of one pre-norm block: single-head attention then a GELU FFN."""

    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray

    def __post_init__(self):
        d = self.w_q.shape[0]
        d_ff = self.w_ff1.shape[1]
        shapes = {
            "ln1_gamma": (d,), "ln1_beta": (d,),
            "w_q": (d, d), "b_q": (d,), "w_k": (d, d), "b_k": (d,),
            "w_v": (d, d), "b_v": (d,), "w_o": (d, d), "b_o": (d,),
            "ln2_gamma": (d,), "ln2_beta": (d,),
            "w_ff1": (d, d_ff), "b_ff1": (d_ff,),
            "w_ff2": (d_ff, d), "b_ff2": (d,),
        }
        for name, expected in shapes.items():
            array = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, array)
            if array.shape != expected:
                raise NumericsError(f"{name} shape {array.shape}, expected {expected}")
            _require_finite(name, array)

    @property
    def width(self) -> int:
        return self.w_q.shape[0]


@dataclass
class EncoderState:
    patch_projection: np.ndarray  # (p*p*3) x d_enc
    cls_token: np.ndarray  # d_enc
    layers: list[TransformerLayer] = field(default_factory=list)
    pos_embedding: np.ndarray | None = None  # (n+1) x d_enc; None means zeros
    d_enc: int = 0  # 0 means infer from patch_projection

    def __post_init__(self):
        self.patch_projection = np.asarray(self.patch_projection, dtype=np.float64)
        self.cls_token = np.asarray(self.cls_token, dtype=np.float64)
        if self.patch_projection.ndim != 2:
            raise NumericsError("patch_projection must be a matrix")
        if self.d_enc == 0:
            self.d_enc = self.patch_projection.shape[1]
        if self.patch_projection.shape[1] != self.d_enc:
            raise NumericsError(
                f"patch_projection width {self.patch_projection.shape[1]} != d_enc {self.d_enc}"
            )
        if self.cls_token.shape != (self.d_enc,):
            raise NumericsError(f"cls_token shape {self.cls_token.shape}, expected ({self.d_enc},)")
        _require_finite("patch_projection", self.patch_projection)
        _require_finite("cls_token", self.cls_token)
        if self.pos_embedding is not None:
            self.pos_embedding = np.asarray(self.pos_embedding, dtype=np.float64)
            if self.pos_embedding.ndim != 2 or self.pos_embedding.shape[1] != self.d_enc:
                raise NumericsError("pos_embedding must be (n+1) x d_enc")
            _require_finite("pos_embedding", self.pos_embedding)
        for layer in self.layers:
            if layer.width != self.d_enc:
                raise NumericsError(
                    f"layer width {layer.width} != d_enc {self.d_enc}"
                )


def random_encoder(p: int, d_enc: int, n_layers: int, seed: int = 0,
                   d_ff: int | None = None, cls_scale: float = 0.5) -> EncoderState:
    """Seeded random weights: matrices at std 1/sqrt(fan_in), zero biases,
    identity layer norms, zero positional embeddings."""
    rng = np.random.default_rng(seed)
    d_ff = 2 * d_enc if d_ff is None else d_ff
    d_in = p * p * 3

    def mat(rows, cols):
        return rng.standard_normal((rows, cols)) / math.sqrt(rows)

    layers = []
    for _ in range(n_layers):
        layers.append(TransformerLayer(
            ln1_gamma=np.ones(d_enc), ln1_beta=np.zeros(d_enc),
            w_q=mat(d_enc, d_enc), b_q=np.zeros(d_enc),
            w_k=mat(d_enc, d_enc), b_k=np.zeros(d_enc),
            w_v=mat(d_enc, d_enc), b_v=np.zeros(d_enc),
            w_o=mat(d_enc, d_enc), b_o=np.zeros(d_enc),
            ln2_gamma=np.ones(d_enc), ln2_beta=np.zeros(d_enc),
            w_ff1=mat(d_enc, d_ff), b_ff1=np.zeros(d_ff),
            w_ff2=mat(d_ff, d_enc), b_ff2=np.zeros(d_enc),
        ))
    return EncoderState(
        patch_projection=mat(d_in, d_enc),
        cls_token=cls_scale * rng.standard_normal(d_enc),
        layers=layers,
    )


def infer_patch_size(enc: EncoderState) -> int:
    flat = enc.patch_projection.shape[0]
    if flat % 3 != 0:
        raise NumericsError(f"projection input width {flat} is not a multiple of 3")
    p = math.isqrt(flat // 3)
    if p * p * 3 != flat:
        raise NumericsError(f"projection input width {flat} is not p*p*3 for integer p")
    return p


def _as_patch_matrix(patches: PatchSet | np.ndarray) -> np.ndarray:
    if isinstance(patches, PatchSet):
        return patches.patches
    matrix = np.asarray(patches, dtype=np.float64)
    if matrix.ndim != 2:
        raise NumericsError("patch input must be an n x (p*p*3) matrix")
    _require_finite("patches", matrix)
    return matrix


def embed_tokens(patches: PatchSet | np.ndarray, enc: EncoderState) -> np.ndarray:
    """Project patches, prepend the class token, add positional embeddings.

    Returns the (n+1) x d_enc token matrix with the class token at row 0.
    """
    matrix = _as_patch_matrix(patches)
    if matrix.shape[1] != enc.patch_projection.shape[0]:
        raise NumericsError(
            f"patch width {matrix.shape[1]} != projection input {enc.patch_projection.shape[0]}"
        )
    tokens = np.vstack([enc.cls_token, matrix @ enc.patch_projection])
    if enc.pos_embedding is not None:
        if enc.pos_embedding.shape[0] != tokens.shape[0]:
            raise NumericsError(
                f"pos_embedding rows {enc.pos_embedding.shape[0]} != token count {tokens.shape[0]}"
            )
        tokens = tokens + enc.pos_embedding
    return tokens


def _attention_sublayer(tokens: np.ndarray, layer: TransformerLayer) -> np.ndarray:
    normed = layer_norm(tokens, layer.ln1_gamma, layer.ln1_beta)
    q = normed @ layer.w_q + layer.b_q
    k = normed @ layer.w_k + layer.b_k
    v = normed @ layer.w_v + layer.b_v
    scores = q @ k.T / math.sqrt(layer.width)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    return tokens + (weights @ v) @ layer.w_o + layer.b_o


def _ffn_sublayer(tokens: np.ndarray, layer: TransformerLayer) -> np.ndarray:
    normed = layer_norm(tokens, layer.ln2_gamma, layer.ln2_beta)
    hidden = gelu(normed @ layer.w_ff1 + layer.b_ff1)
    return tokens + hidden @ layer.w_ff2 + layer.b_ff2


def vit_forward_with_cut(patches: PatchSet | np.ndarray,
                         enc: EncoderState) -> np.ndarray:
    """Run the encoder up to (and including) the last attention sublayer.

    With zero layers the cut activations are the embedded tokens themselves.
    """
    tokens = embed_tokens(patches, enc)
    for layer in enc.layers[:-1]:
        tokens = _ffn_sublayer(_attention_sublayer(tokens, layer), layer)
    if enc.layers:
        tokens = _attention_sublayer(tokens, enc.layers[-1])
    return tokens


def tail_forward(cut_tokens: np.ndarray,
                 enc: EncoderState) -> tuple[np.ndarray, np.ndarray]:
    """Apply the remainder after the cut; returns (patch embeddings, cls)."""
    tokens = np.asarray(cut_tokens, dtype=np.float64)
    if enc.layers:
        tokens = _ffn_sublayer(tokens, enc.layers[-1])
    return tokens[1:], tokens[0]


def tail_backward(grad_tokens_out: np.ndarray, cut_tokens: np.ndarray,
                  enc: EncoderState) -> np.ndarray:
    """Backpropagate a gradient at the encoder output to the cut activations."""
    grad_out = np.asarray(grad_tokens_out, dtype=np.float64)
    if not enc.layers:
        return grad_out.copy()
    layer = enc.layers[-1]
    x = np.asarray(cut_tokens, dtype=np.float64)
    normed = layer_norm(x, layer.ln2_gamma, layer.ln2_beta)
    pre_act = normed @ layer.w_ff1 + layer.b_ff1
    grad_hidden = grad_out @ layer.w_ff2.T
    grad_pre = grad_hidden * gelu_prime(pre_act)
    grad_normed = grad_pre @ layer.w_ff1.T
    return grad_out + _layer_norm_backward(grad_normed, x, layer.ln2_gamma)


def vit_forward(patches: PatchSet | np.ndarray,
                enc: EncoderState) -> tuple[np.ndarray, np.ndarray]:
    """Full encoder pass; returns (H: n x d_enc patch embeddings, cls vector)."""
    return tail_forward(vit_forward_with_cut(patches, enc), enc)
