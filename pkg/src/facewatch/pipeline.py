"""The frame-to-report engine: detect, match, score, persist, analyze.

Frames arrive from a manifest or a synthetic stream. Faces are matched against
the registry; only registered identities ever reach the scorer or the sample
store, so bystanders leave no trace beyond a discard counter. Samples fall
into tumbling windows of equal duration anchored at the first processed
frame's timestamp (a window also closes early if it fills to the configured
sample cap); each completed subject-window yields window statistics, a change
verdict against the adjacent previous window, and one written report.

Reports are timestamped with stream time (the window end), so a run with a
fixed seed and no LLM endpoint is byte-for-byte reproducible.
"""

from __future__ import annotations

import json
import time
import urllib.parse
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agent import (
    LEVEL_HIGH_THRESHOLD,
    LEVEL_LOW_THRESHOLD,
    LlmEndpoint,
    ReportContext,
    generate_report,
    report_to_json,
)
from .analytics import (
    DEFAULT_BINS,
    ChangeVerdict,
    RiskSample,
    change_test,
    window_stats,
)
from .errors import ConfigError, FacewatchError
from .identity import (
    DEFAULT_MATCH_THRESHOLD,
    DetectorPlugin,
    EmbedderPlugin,
    FaceRegistry,
    detect_faces,
    embed,
    match_identity,
)
from .processes import ConstantProcess
from .records import HealthDatabase, HealthRecord, SubjectProfile
from .scoring import ScoreRequest, build_scorer, score
from .streams import FrameRecord, SynthSpec, load_manifest, open_stream, synth_stream

STAGES = ("detect", "embed", "match", "score", "persist", "analyze")
WARMUP_FRAMES = 5


@dataclass
class PipelineConfig:
    output_root: str
    manifest_path: str | None = None
    registry_path: str | None = None
    scorer: dict = field(default_factory=lambda: {"kind": "oracle_noise", "sigma": 0.0})
    window_s: float = 86400.0
    max_window_samples: int = 1000
    bins: int = DEFAULT_BINS
    alpha: float = 0.01
    tau: float = DEFAULT_MATCH_THRESHOLD
    theta_low: float = LEVEL_LOW_THRESHOLD
    theta_high: float = LEVEL_HIGH_THRESHOLD
    llm: LlmEndpoint | None = None
    stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.output_root:
            raise ConfigError("output_root is required")
        for label, path in (("manifest", self.manifest_path),
                            ("registry", self.registry_path)):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{label} path does not exist: {path}")
        if self.window_s <= 0:
            raise ConfigError(f"window_s must be positive, got {self.window_s}")
        if self.max_window_samples < 1:
            raise ConfigError("max_window_samples must be >= 1")
        if self.bins < 2:
            raise ConfigError(f"bins must be >= 2, got {self.bins}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.tau < 0.0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if not 0.0 <= self.theta_low < self.theta_high <= 1.0:
            raise ConfigError(
                f"need 0 <= theta_low < theta_high <= 1, got "
                f"({self.theta_low}, {self.theta_high})"
            )
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")


def config_from_json(data: dict, base_dir: str | Path | None = None) -> PipelineConfig:
    """Build a config from its JSON document form; relative paths resolve
    against base_dir."""
    known = {
        "output_root", "manifest_path", "registry_path", "scorer", "window_s",
        "max_window_samples", "bins", "alpha", "tau", "theta_low", "theta_high",
        "llm", "stride", "seed",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    fields = dict(data)
    if base_dir is not None:
        for key in ("output_root", "manifest_path", "registry_path"):
            if fields.get(key):
                fields[key] = str((Path(base_dir) / fields[key]).resolve())
    llm = fields.get("llm")
    if isinstance(llm, dict):
        fields["llm"] = LlmEndpoint(
            base_url=llm["base_url"],
            model_name=llm["model_name"],
            timeout_ms=int(llm.get("timeout_ms", 30_000)),
            max_retries=int(llm.get("max_retries", 2)),
        )
    return PipelineConfig(**fields)


@dataclass
class RunSummary:
    frames_processed: int = 0
    faces_detected: int = 0
    faces_matched: int = 0
    faces_discarded: int = 0
    samples_stored: int = 0
    windows_closed: int = 0
    verdicts: list[tuple[str, int, ChangeVerdict]] = field(default_factory=list)
    reports_written: int = 0
    samples_by_subject: dict[str, int] = field(default_factory=dict)
    errors: int = 0
    error_log: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class StageTiming:
    stage: str
    count: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    max_ms: float


@dataclass(frozen=True)
class _WindowClose:
    label: str
    current: list[RiskSample]
    previous: list[RiskSample]
    t_start: int
    t_end: int


class _WindowTracker:
    """Tumbling-window bookkeeping shared by all subjects.

    Boundaries sit at anchor + k*window_ms where the anchor is the first
    processed frame's timestamp. A subject's window also closes early when it
    reaches max_samples; the replacement window still ends at the global
    boundary.
    """

    def __init__(self, window_ms: int, max_samples: int):
        self.window_ms = window_ms
        self.max_samples = max_samples
        self.anchor: int | None = None
        self.index = 0
        self.buffers: dict[str, list[RiskSample]] = {}
        self.previous: dict[str, list[RiskSample]] = {}
        self.starts: dict[str, int] = {}
        self.pending: list[_WindowClose] = []

    def observe(self, timestamp_ms: int):
        if self.anchor is None:
            self.anchor = timestamp_ms
        while timestamp_ms >= self.anchor + (self.index + 1) * self.window_ms:
            self._close_all(self.anchor + (self.index + 1) * self.window_ms)
            self.index += 1

    def add(self, sample: RiskSample):
        self.observe(sample.timestamp_ms)
        label = sample.subject_id
        bucket = self.buffers.setdefault(label, [])
        if not bucket:
            self.starts[label] = max(sample.timestamp_ms,
                                     self.anchor + self.index * self.window_ms)
        bucket.append(sample)
        if len(bucket) >= self.max_samples:
            self._close_one(label, sample.timestamp_ms)

    def _close_one(self, label: str, t_end: int):
        bucket = self.buffers.get(label, [])
        if bucket:
            self.pending.append(_WindowClose(
                label=label, current=bucket,
                previous=self.previous.get(label, []),
                t_start=self.starts[label], t_end=t_end,
            ))
        self.previous[label] = bucket
        self.buffers[label] = []

    def _close_all(self, boundary_ms: int):
        for label in sorted(self.buffers):
            if self.buffers[label]:
                self._close_one(label, boundary_ms)
            else:
                self.previous[label] = []

    def drain(self) -> list[_WindowClose]:
        closed, self.pending = self.pending, []
        return closed


class _Recorder:
    def __init__(self):
        self.frame_durations: dict[str, list[float]] = {s: [] for s in STAGES}
        self._current: dict[str, float] = {}

    def start_frame(self):
        self._current = {s: 0.0 for s in STAGES}

    def add(self, stage: str, seconds: float):
        self._current[stage] += seconds

    def end_frame(self, warm: bool):
        if warm:
            for stage in STAGES:
                self.frame_durations[stage].append(self._current[stage] * 1000.0)

    def timings(self) -> list[StageTiming]:
        out = []
        for stage in STAGES:
            samples = np.asarray(self.frame_durations[stage], dtype=np.float64)
            if samples.size == 0:
                out.append(StageTiming(stage, 0, 0.0, 0.0, 0.0, 0.0))
                continue
            out.append(StageTiming(
                stage=stage,
                count=int(samples.size),
                mean_ms=float(samples.mean()),
                p50_ms=float(np.percentile(samples, 50)),
                p95_ms=float(np.percentile(samples, 95)),
                max_ms=float(samples.max()),
            ))
        return out


def _subject_dir_name(label: str) -> str:
    return urllib.parse.quote(label, safe="")


def _ensure_profile(db: HealthDatabase, label: str) -> SubjectProfile:
    if db.has_profile(label):
        return db.get_profile(label)
    profile = SubjectProfile(subject_id=label, registry_label=label,
                             health_record=HealthRecord(subject_id=label))
    db.upsert_profile(profile)
    return profile


def _write_report(config: PipelineConfig, db: HealthDatabase, closed: _WindowClose,
                  summary: RunSummary):
    current = window_stats(closed.current, bins=config.bins,
                           t_start=closed.t_start, t_end=closed.t_end)
    previous = window_stats(closed.previous, bins=config.bins)
    verdict = change_test(closed.previous, closed.current,
                          alpha=config.alpha, bins=config.bins)
    summary.windows_closed += 1
    summary.verdicts.append((closed.label, closed.t_end, verdict))

    if current.mean is not None:
        patient_level = current.mean
    elif previous.mean is not None:
        patient_level = previous.mean
    else:
        patient_level = 0.0
    ctx = ReportContext(
        profile=_ensure_profile(db, closed.label),
        current=current,
        previous=previous,
        verdict=verdict,
        patient_level=patient_level,
        theta_low=config.theta_low,
        theta_high=config.theta_high,
    )
    report = generate_report(ctx, endpoint=config.llm, now_ms=closed.t_end)
    directory = Path(config.output_root) / "reports" / _subject_dir_name(closed.label)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{closed.t_end}.json"
    path.write_text(json.dumps(report_to_json(report), indent=2) + "\n",
                    encoding="utf-8")
    summary.reports_written += 1


def _frame_source(config: PipelineConfig,
                  frames: Iterable[FrameRecord] | None) -> Iterable[FrameRecord]:
    if frames is not None:
        return frames
    if config.manifest_path is None:
        raise ConfigError("run needs either a manifest path or an in-memory frame source")
    return open_stream(load_manifest(config.manifest_path))


def _load_registry(config: PipelineConfig,
                   registry: FaceRegistry | None) -> FaceRegistry | None:
    if registry is not None:
        return registry
    if config.registry_path is not None:
        return FaceRegistry.load(config.registry_path)
    return None


def run_pipeline(config: PipelineConfig,
                 frames: Iterable[FrameRecord] | None = None,
                 registry: FaceRegistry | None = None,
                 detector: DetectorPlugin | None = None,
                 embedder: EmbedderPlugin | None = None,
                 _recorder: _Recorder | None = None) -> RunSummary:
    """Process a stream end to end; see the module docstring for semantics.

    A module error inside one frame increments the error count and skips that
    frame; the run continues. The trailing partial window is not flushed.
    """
    registry = _load_registry(config, registry)
    seed_root = np.random.SeedSequence(config.seed)
    scorer_seed = int(seed_root.spawn(1)[0].generate_state(1)[0])
    scorer = build_scorer(config.scorer, seed=scorer_seed)
    db = HealthDatabase(Path(config.output_root))
    tracker = _WindowTracker(window_ms=int(round(config.window_s * 1000.0)),
                             max_samples=config.max_window_samples)
    summary = RunSummary()
    recorder = _recorder

    def timed(stage: str, fn):
        if recorder is None:
            return fn()
        start = time.perf_counter()
        try:
            return fn()
        finally:
            recorder.add(stage, time.perf_counter() - start)

    with db.risk:
        for position, frame in enumerate(_frame_source(config, frames)):
            if position % config.stride != 0:
                continue
            if recorder is not None:
                recorder.start_frame()
            try:
                faces = timed("detect", lambda: detect_faces(frame, detector))
                summary.faces_detected += len(faces)
                embeddings = timed("embed",
                                   lambda: [embed(face, embedder) for face in faces])

                def match_all():
                    if registry is None:
                        return [None] * len(embeddings)
                    return [match_identity(e, registry, threshold=config.tau)
                            for e in embeddings]

                matches = timed("match", match_all)

                def score_matched():
                    scored = []
                    for face, embedding, match in zip(faces, embeddings, matches):
                        if match is None or not match.accepted:
                            summary.faces_discarded += 1
                            continue
                        true_risk = (face.annotation.true_risk
                                     if face.annotation is not None else None)
                        request = ScoreRequest(
                            embedding=embedding, true_risk=true_risk,
                            stream_id=frame.stream_id,
                            frame_index=frame.frame_index, label=match.label,
                        )
                        scored.append((match.label, score(request, scorer)))
                    return scored

                scored = timed("score", score_matched)
                summary.faces_matched += len(scored)

                def persist():
                    for label, risk in scored:
                        sample = RiskSample(subject_id=label,
                                            timestamp_ms=frame.timestamp_ms,
                                            value=risk.value)
                        db.risk.append(sample)
                        tracker.add(sample)
                        summary.samples_stored += 1
                        summary.samples_by_subject[label] = (
                            summary.samples_by_subject.get(label, 0) + 1)

                timed("persist", persist)

                def analyze():
                    tracker.observe(frame.timestamp_ms)
                    for closed in tracker.drain():
                        _write_report(config, db, closed, summary)

                timed("analyze", analyze)
            except FacewatchError as exc:
                summary.errors += 1
                summary.error_log.append(
                    f"frame {frame.frame_index} ({frame.stream_id}): {exc}")
            finally:
                if recorder is not None:
                    recorder.end_frame(warm=summary.frames_processed >= WARMUP_FRAMES)
            summary.frames_processed += 1
    return summary


def _profile_frames(config: PipelineConfig, repeats: int):
    """Synthetic single-subject stream plus a matching registry for profiling."""
    from .identity import subject_embedding

    label = "profile-subject"
    dim = 16
    fps = 30.0
    spec = SynthSpec(subjects=[(label, ConstantProcess(0.5))],
                     duration_s=repeats / fps, fps=fps, seed=config.seed,
                     dim=dim, stream_id="profile")
    registry = FaceRegistry(dimension=dim)
    registry.add(label, subject_embedding(config.seed, label, dim))
    return open_stream(synth_stream(spec)), registry


def profile(config: PipelineConfig, repeats: int = 100,
            frames: Iterable[FrameRecord] | None = None,
            registry: FaceRegistry | None = None) -> list[StageTiming]:
    """Per-stage wall-clock timings over `repeats` frames, warm-up excluded.

    Without an explicit frame source (or manifest in the config) a synthetic
    one-subject stream is generated.
    """
    if repeats < 10:
        raise ConfigError(f"profiling needs at least 10 frames, got {repeats}")
    if frames is None and config.manifest_path is None:
        frames, generated_registry = _profile_frames(config, repeats)
        if registry is None:
            registry = generated_registry
    recorder = _Recorder()
    run_pipeline(config, frames=frames, registry=registry, _recorder=recorder)
    return recorder.timings()


def timings_to_json(timings: Sequence[StageTiming]) -> dict:
    return {
        "version": 1,
        "stages": [
            {
                "stage": t.stage, "count": t.count, "mean_ms": t.mean_ms,
                "p50_ms": t.p50_ms, "p95_ms": t.p95_ms, "max_ms": t.max_ms,
            }
            for t in timings
        ],
    }
