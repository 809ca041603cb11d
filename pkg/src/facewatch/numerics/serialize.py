"""JSON persistence for weights and fixtures: nested arrays of 64-bit reals
plus a version field."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import NumericsError
from .encoder import EncoderState, TransformerLayer
from .gradcam import LinearHead
from .vqkd import Codebook

FORMAT_VERSION = 1

_LAYER_FIELDS = (
    "ln1_gamma", "ln1_beta", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
    "w_o", "b_o", "ln2_gamma", "ln2_beta", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
)


def _array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def layer_to_json(layer: TransformerLayer) -> dict:
    return {name: getattr(layer, name).tolist() for name in _LAYER_FIELDS}


def layer_from_json(data: dict) -> TransformerLayer:
    return TransformerLayer(**{name: _array(data[name]) for name in _LAYER_FIELDS})


def encoder_to_json(enc: EncoderState) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "encoder",
        "patch_projection": enc.patch_projection.tolist(),
        "cls_token": enc.cls_token.tolist(),
        "pos_embedding": None if enc.pos_embedding is None else enc.pos_embedding.tolist(),
        "layers": [layer_to_json(layer) for layer in enc.layers],
    }


def encoder_from_json(data: dict) -> EncoderState:
    _check_version(data)
    pos = data.get("pos_embedding")
    return EncoderState(
        patch_projection=_array(data["patch_projection"]),
        cls_token=_array(data["cls_token"]),
        layers=[layer_from_json(entry) for entry in data["layers"]],
        pos_embedding=None if pos is None else _array(pos),
    )


def codebook_to_json(cb: Codebook) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "codebook",
        "vectors": cb.vectors.tolist(),
        "projection": cb.projection.tolist(),
    }


def codebook_from_json(data: dict) -> Codebook:
    _check_version(data)
    return Codebook(vectors=_array(data["vectors"]),
                    projection=_array(data["projection"]))


def head_to_json(head: LinearHead) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "linear_head",
        "patch_weights": head.patch_weights.tolist(),
        "cls_weights": head.cls_weights.tolist(),
        "bias": head.bias.tolist(),
    }


def head_from_json(data: dict) -> LinearHead:
    _check_version(data)
    return LinearHead(patch_weights=_array(data["patch_weights"]),
                      cls_weights=_array(data["cls_weights"]),
                      bias=_array(data["bias"]))


def _check_version(data: dict):
    version = data.get("version")
    if version != FORMAT_VERSION:
        raise NumericsError(f"unsupported weight format version {version!r}")


def save_json(path: str | Path, payload: dict):
    if "version" not in payload:
        raise NumericsError("payload must carry a version field")
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise NumericsError(f"cannot load {path}: {exc}") from exc


def fixtures_dir() -> Path:
    return Path(__file__).parent / "fixtures"
