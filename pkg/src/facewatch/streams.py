"""Frame sources: manifest-backed image sequences and synthetic streams.

A stream is described by a JSONL manifest, one entry per line. Entries either
point at an image file or carry embedding-only annotations, which lets the
rest of the pipeline run without any camera or model weights. An optional
header line carries stream id and fps; replaying a manifest is bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, ManifestError, StreamError
from .identity import FaceBox, FaceEmbedding, subject_embedding
from .processes import RiskProcess, parse_process, process_to_spec

DEFAULT_FPS = 30.0
MANIFEST_VERSION = 1


@dataclass
class FaceAnnotation:
    """Ground-truth carrier: box plus optional identity, embedding and risk."""

    box: FaceBox
    identity_label: str | None = None
    embedding: FaceEmbedding | None = None
    true_risk: float | None = None

    def __post_init__(self):
        if self.true_risk is not None and not 0.0 <= self.true_risk <= 1.0:
            raise ValueError(f"true_risk must lie in [0,1], got {self.true_risk}")


@dataclass(eq=False)
class FrameRecord:
    """One timestamped sample from a stream; image may be absent for synthetic frames."""

    stream_id: str
    frame_index: int
    timestamp_ms: int
    image: np.ndarray | None = None
    annotations: list[FaceAnnotation] = field(default_factory=list)


@dataclass
class ManifestEntry:
    frame_index: int
    timestamp_ms: int | None = None
    image_path: str | None = None
    annotations: list[FaceAnnotation] = field(default_factory=list)


@dataclass
class StreamManifest:
    stream_id: str
    fps: float = DEFAULT_FPS
    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: Path | None = None

    def __post_init__(self):
        if self.fps <= 0:
            raise ManifestError(f"fps must be positive, got {self.fps}")
        last = -1
        for entry in self.entries:
            if entry.frame_index <= last:
                raise ManifestError(
                    f"frame_index {entry.frame_index} not strictly increasing after {last}"
                )
            last = entry.frame_index


def auto_timestamp_ms(frame_index: int, fps: float) -> int:
    """Millisecond timestamp for a frame at the given rate.

    Rounding per frame keeps consecutive spacings at round(1000/fps) +/- 1 ms
    while the long-run drift stays below 1 ms/s.
    """
    return round(frame_index * 1000.0 / fps)


def _annotation_to_json(ann: FaceAnnotation) -> dict:
    doc: dict = {
        "box": {"x": ann.box.x, "y": ann.box.y, "w": ann.box.w, "h": ann.box.h,
                "confidence": ann.box.confidence},
    }
    if ann.identity_label is not None:
        doc["identity_label"] = ann.identity_label
    if ann.embedding is not None:
        doc["embedding"] = ann.embedding.vector.tolist()
    if ann.true_risk is not None:
        doc["true_risk"] = ann.true_risk
    return doc


def _annotation_from_json(doc: dict) -> FaceAnnotation:
    box_doc = doc["box"]
    box = FaceBox(
        x=int(box_doc["x"]), y=int(box_doc["y"]),
        w=int(box_doc["w"]), h=int(box_doc["h"]),
        confidence=float(box_doc.get("confidence", 1.0)),
    )
    embedding = None
    if "embedding" in doc:
        embedding = FaceEmbedding.from_vector(doc["embedding"])
    return FaceAnnotation(
        box=box,
        identity_label=doc.get("identity_label"),
        embedding=embedding,
        true_risk=doc.get("true_risk"),
    )


def save_manifest(manifest: StreamManifest, path) -> Path:
    """Write a manifest as JSONL: a header line, then one entry per line."""
    path = Path(path)
    lines = [json.dumps({
        "kind": "stream", "version": MANIFEST_VERSION,
        "stream_id": manifest.stream_id, "fps": manifest.fps,
    })]
    for entry in manifest.entries:
        doc: dict = {"frame_index": entry.frame_index}
        if entry.timestamp_ms is not None:
            doc["timestamp_ms"] = entry.timestamp_ms
        if entry.image_path is not None:
            doc["image_path"] = entry.image_path
        if entry.annotations:
            doc["annotations"] = [_annotation_to_json(a) for a in entry.annotations]
        lines.append(json.dumps(doc))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> StreamManifest:
    """Parse a JSONL manifest; malformed lines raise ManifestError with the line index."""
    path = Path(path)
    try:
        raw_lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    stream_id = path.stem
    fps = DEFAULT_FPS
    entries: list[ManifestEntry] = []
    for lineno, raw in enumerate(raw_lines, start=1):
        if not raw.strip():
            continue
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON: {exc.msg}", line=lineno) from exc
        if not isinstance(doc, dict):
            raise ManifestError("line is not a JSON object", line=lineno)
        if doc.get("kind") == "stream":
            stream_id = doc.get("stream_id", stream_id)
            fps = float(doc.get("fps", fps))
            continue
        try:
            entry = ManifestEntry(
                frame_index=int(doc["frame_index"]),
                timestamp_ms=int(doc["timestamp_ms"]) if "timestamp_ms" in doc else None,
                image_path=doc.get("image_path"),
                annotations=[_annotation_from_json(a) for a in doc.get("annotations", [])],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad entry: {exc}", line=lineno) from exc
        entries.append(entry)

    try:
        return StreamManifest(stream_id=stream_id, fps=fps, entries=entries,
                              base_dir=path.parent)
    except ManifestError:
        raise
    except Exception as exc:  # defensive: invariant violations surface as ManifestError
        raise ManifestError(str(exc)) from exc


def _load_image(entry: ManifestEntry, base_dir: Path | None) -> np.ndarray:
    from PIL import Image

    img_path = Path(entry.image_path)
    if not img_path.is_absolute() and base_dir is not None:
        img_path = base_dir / img_path
    if not img_path.exists():
        raise StreamError(
            f"entry frame_index={entry.frame_index}: image file not found: {img_path}"
        )
    try:
        with Image.open(img_path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise StreamError(
            f"entry frame_index={entry.frame_index}: cannot decode {img_path}: {exc}"
        ) from exc
    if array.shape[0] < 1 or array.shape[1] < 1:
        raise StreamError(f"entry frame_index={entry.frame_index}: degenerate image")
    return array


def open_stream(manifest: StreamManifest) -> Iterator[FrameRecord]:
    """Yield FrameRecords in frame order, filling timestamps from fps when absent.

    Never reorders or drops entries; a missing image file raises StreamError
    naming the entry. The iterator is single-consumer.
    """
    last_ts: int | None = None
    for entry in manifest.entries:
        ts = entry.timestamp_ms
        if ts is None:
            ts = auto_timestamp_ms(entry.frame_index, manifest.fps)
        if last_ts is not None and ts < last_ts:
            raise StreamError(
                f"entry frame_index={entry.frame_index}: timestamp {ts} decreases below {last_ts}"
            )
        last_ts = ts
        image = None
        if entry.image_path is not None:
            image = _load_image(entry, manifest.base_dir)
            h, w = image.shape[0], image.shape[1]
            for ann in entry.annotations:
                if ann.box.x + ann.box.w > w or ann.box.y + ann.box.h > h:
                    raise StreamError(
                        f"entry frame_index={entry.frame_index}: box exceeds image bounds"
                    )
        yield FrameRecord(
            stream_id=manifest.stream_id,
            frame_index=entry.frame_index,
            timestamp_ms=ts,
            image=image,
            annotations=list(entry.annotations),
        )


@dataclass
class SynthSpec:
    """Configuration for a synthetic, embedding-only stream."""

    subjects: list[tuple[str, RiskProcess]]
    duration_s: float
    fps: float = 10.0
    seed: int = 0
    dim: int = 16
    stream_id: str = "synth"

    def __post_init__(self):
        if not self.subjects:
            raise ConfigError("synthetic stream needs at least one subject")
        if self.duration_s <= 0:
            raise ConfigError(f"duration_s must be positive, got {self.duration_s}")
        if self.fps <= 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        labels = [label for label, _ in self.subjects]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate subject labels: {labels}")


def synth_stream(spec: SynthSpec) -> StreamManifest:
    """Generate an embedding-only manifest with per-subject risk processes.

    Deterministic for a fixed seed: identity vectors derive from (seed, label)
    and risk draws consume one master generator in (frame, subject) order.
    """
    rng = np.random.default_rng(spec.seed)
    embeddings = {
        label: subject_embedding(spec.seed, label, spec.dim) for label, _ in spec.subjects
    }
    n_frames = int(round(spec.duration_s * spec.fps))
    placeholder_box = FaceBox(x=0, y=0, w=1, h=1, confidence=1.0)
    entries = []
    for i in range(n_frames):
        t_s = i / spec.fps
        annotations = [
            FaceAnnotation(
                box=placeholder_box,
                identity_label=label,
                embedding=embeddings[label],
                true_risk=float(process.sample_at(rng, t_s)),
            )
            for label, process in spec.subjects
        ]
        entries.append(ManifestEntry(
            frame_index=i,
            timestamp_ms=auto_timestamp_ms(i, spec.fps),
            annotations=annotations,
        ))
    return StreamManifest(stream_id=spec.stream_id, fps=spec.fps, entries=entries)


def synth_spec_to_json(spec: SynthSpec) -> dict:
    return {
        "subjects": [[label, process_to_spec(p)] for label, p in spec.subjects],
        "duration_s": spec.duration_s,
        "fps": spec.fps,
        "seed": spec.seed,
        "dim": spec.dim,
        "stream_id": spec.stream_id,
    }


def synth_spec_from_json(doc: dict) -> SynthSpec:
    try:
        return SynthSpec(
            subjects=[(label, parse_process(proc)) for label, proc in doc["subjects"]],
            duration_s=float(doc["duration_s"]),
            fps=float(doc.get("fps", 10.0)),
            seed=int(doc.get("seed", 0)),
            dim=int(doc.get("dim", 16)),
            stream_id=str(doc.get("stream_id", "synth")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad synthetic stream spec: {exc}") from exc
