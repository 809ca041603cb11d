"""Face detection interface and embedding-based identity matching.

Detection is pluggable: the default stub reads ground-truth annotations from
the frame, so the pipeline stays testable without a neural detector. Matching
scans a labeled registry of unit-norm embeddings for the nearest entry by
Euclidean distance and accepts it only within a configurable threshold, so
faces of unregistered bystanders are dropped.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import numpy as np

from .errors import (
    DetectionError,
    DimensionMismatchError,
    EmbeddingError,
    RegistryError,
)

if TYPE_CHECKING:
    from .streams import FaceAnnotation, FrameRecord

NORM_TOLERANCE = 1e-9
DEFAULT_MATCH_THRESHOLD = 0.9


@dataclass
class FaceBox:
    """Pixel-space face bounding box, top-left origin."""

    x: int
    y: int
    w: int
    h: int
    confidence: float = 1.0

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be non-negative, got ({self.x}, {self.y})")
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box size must be >= 1, got ({self.w}, {self.h})")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0,1], got {self.confidence}")


@dataclass
class FaceEmbedding:
    """Identity vector; unit ell-2 norm when `normalized` is set."""

    vector: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise EmbeddingError(f"embedding must be 1-D, got shape {self.vector.shape}")
        if self.normalized:
            norm = float(np.linalg.norm(self.vector))
            if abs(norm - 1.0) > NORM_TOLERANCE:
                raise EmbeddingError(f"embedding flagged normalized but has norm {norm!r}")

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    @staticmethod
    def from_vector(values, normalize: bool = True) -> "FaceEmbedding":
        """Build an embedding, normalizing unless the input is already unit norm.

        Inputs that are unit norm within tolerance are passed through unchanged
        so round-trips stay bit-exact.
        """
        vec = np.asarray(values, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise EmbeddingError("cannot normalize a zero embedding vector")
        if normalize and abs(norm - 1.0) > NORM_TOLERANCE:
            vec = vec / norm
        return FaceEmbedding(vector=vec, normalized=abs(float(np.linalg.norm(vec)) - 1.0) <= NORM_TOLERANCE)


@dataclass
class MatchResult:
    label: str
    distance: float
    accepted: bool


class FaceRegistry:
    """Labeled identity database; each label may hold several template embeddings.

    Registrations are serialized behind a lock; reads take a snapshot of the
    template lists so a concurrent match sees a consistent state.
    """

    VERSION = 1

    def __init__(self, dimension: int):
        if dimension < 1:
            raise RegistryError(f"dimension must be >= 1, got {dimension}")
        self.dimension = dimension
        self._entries: dict[str, list[np.ndarray]] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def labels(self) -> list[str]:
        return sorted(self._entries)

    def templates(self, label: str) -> list[np.ndarray]:
        with self._lock:
            if label not in self._entries:
                raise RegistryError(f"unknown label {label!r}")
            return [t.copy() for t in self._entries[label]]

    def add(self, label: str, embedding: FaceEmbedding) -> None:
        """Register one template under `label`, creating the entry if new."""
        if not label:
            raise RegistryError("label must be non-empty")
        if embedding.dim != self.dimension:
            raise DimensionMismatchError(
                f"embedding dim {embedding.dim} != registry dim {self.dimension}"
            )
        with self._lock:
            self._entries.setdefault(label, []).append(embedding.vector.copy())

    def snapshot(self) -> list[tuple[str, list[np.ndarray]]]:
        with self._lock:
            return [(label, list(vecs)) for label, vecs in self._entries.items()]

    def save(self, path) -> None:
        doc = {
            "version": self.VERSION,
            "dimension": self.dimension,
            "entries": [
                {"label": label, "templates": [v.tolist() for v in vecs]}
                for label, vecs in sorted(self._entries.items())
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FaceRegistry":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise RegistryError(f"cannot read registry {path}: {exc}") from exc
        try:
            registry = cls(int(doc["dimension"]))
            for entry in doc["entries"]:
                for template in entry["templates"]:
                    vec = np.asarray(template, dtype=np.float64)
                    if vec.shape != (registry.dimension,):
                        raise RegistryError(
                            f"template for {entry['label']!r} has shape {vec.shape}"
                        )
                    registry._entries.setdefault(entry["label"], []).append(vec)
        except (KeyError, TypeError, ValueError) as exc:
            raise RegistryError(f"malformed registry document {path}: {exc}") from exc
        return registry


def match_identity(
    probe: FaceEmbedding,
    registry: FaceRegistry,
    threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> MatchResult | None:
    """Return the registry entry nearest to `probe` by ell-2 distance.

    Multi-template labels score by their closest template. Exact distance ties
    break toward the lexicographically smallest label, so the result does not
    depend on registration order. Returns None only for an empty registry;
    `accepted` reflects the threshold.
    """
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    entries = registry.snapshot()
    if not entries:
        return None
    if probe.dim != registry.dimension:
        raise DimensionMismatchError(
            f"probe dim {probe.dim} != registry dim {registry.dimension}"
        )
    best_label: str | None = None
    best_distance = np.inf
    for label, templates in entries:
        dist = min(float(np.linalg.norm(t - probe.vector)) for t in templates)
        if dist < best_distance or (dist == best_distance and (best_label is None or label < best_label)):
            best_label = label
            best_distance = dist
    return MatchResult(label=best_label, distance=best_distance, accepted=best_distance <= threshold)


def register_face(probe: FaceEmbedding, label: str, registry: FaceRegistry) -> FaceRegistry:
    """Add `probe` as a template for `label` and return the registry."""
    registry.add(label, probe)
    return registry


@dataclass
class DetectedFace:
    """One detection: a box plus either a pixel crop or a ready embedding."""

    box: FaceBox
    crop: np.ndarray | None = None
    embedding: FaceEmbedding | None = None
    annotation: "FaceAnnotation | None" = None


DetectorPlugin = Callable[["FrameRecord"], list[DetectedFace]]


class AnnotationDetector:
    """Stub detector that returns the frame's ground-truth annotations verbatim."""

    def __call__(self, frame: "FrameRecord") -> list[DetectedFace]:
        results = []
        for ann in frame.annotations:
            crop = None
            if frame.image is not None:
                b = ann.box
                crop = frame.image[b.y : b.y + b.h, b.x : b.x + b.w]
            results.append(
                DetectedFace(box=ann.box, crop=crop, embedding=ann.embedding, annotation=ann)
            )
        return results


def detect_faces(frame: "FrameRecord", detector: DetectorPlugin | None = None) -> list[DetectedFace]:
    """Run `detector` (the annotation stub by default) on one frame.

    Plug-in exceptions are wrapped in DetectionError carrying the frame index.
    """
    detector = detector or AnnotationDetector()
    try:
        return detector(frame)
    except Exception as exc:
        raise DetectionError(str(exc), frame_index=frame.frame_index) from exc


class PassthroughEmbedder:
    """Return the annotation-provided embedding unchanged (normalizing if needed)."""

    def __init__(self, dimension: int | None = None):
        self.dimension = dimension

    def __call__(self, face: DetectedFace) -> FaceEmbedding:
        if face.embedding is None:
            raise EmbeddingError("passthrough embedder needs an annotation embedding")
        emb = FaceEmbedding.from_vector(face.embedding.vector)
        if self.dimension is not None and emb.dim != self.dimension:
            raise DimensionMismatchError(
                f"embedding dim {emb.dim} != configured dim {self.dimension}"
            )
        return emb


class HashProjectionEmbedder:
    """Deterministic pixels-to-unit-vector embedder.

    The crop bytes seed a PRNG that draws the embedding, so identical crops
    always map to identical unit vectors. A stand-in for a real face encoder.
    """

    def __init__(self, dimension: int = 16):
        if dimension < 1:
            raise EmbeddingError(f"dimension must be >= 1, got {dimension}")
        self.dimension = dimension

    def __call__(self, face: DetectedFace) -> FaceEmbedding:
        if face.crop is None or face.crop.size == 0:
            raise EmbeddingError("hash-projection embedder needs a non-empty pixel crop")
        crop = np.ascontiguousarray(face.crop, dtype=np.uint8)
        digest = hashlib.sha256(repr(crop.shape).encode() + crop.tobytes()).digest()
        seed = int.from_bytes(digest[:8], "big")
        rng = np.random.default_rng(seed)
        vec = rng.standard_normal(self.dimension)
        return FaceEmbedding.from_vector(vec)


EmbedderPlugin = Callable[[DetectedFace], FaceEmbedding]


def embed(face: DetectedFace, embedder: EmbedderPlugin | None = None) -> FaceEmbedding:
    """Embed a detected face; defaults to passthrough, falling back to hashing pixels."""
    if embedder is not None:
        return embedder(face)
    if face.embedding is not None:
        return PassthroughEmbedder()(face)
    return HashProjectionEmbedder()(face)


def subject_embedding(seed: int, label: str, dimension: int) -> FaceEmbedding:
    """Deterministic unit-norm identity vector for a synthetic subject."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    label_key = int.from_bytes(digest[:8], "big")
    rng = np.random.default_rng(np.random.SeedSequence([seed, label_key]))
    return FaceEmbedding.from_vector(rng.standard_normal(dimension))
