"""End-to-end pipeline runs: determinism, filtering, windows, profiling."""

from pathlib import Path

import pytest

from facewatch.errors import ConfigError
from facewatch.identity import FaceRegistry, subject_embedding
from facewatch.pipeline import (
    STAGES,
    PipelineConfig,
    config_from_json,
    profile,
    run_pipeline,
    timings_to_json,
)
from facewatch.processes import BetaProcess, ConstantProcess, StepProcess
from facewatch.streams import SynthSpec, open_stream, save_manifest, synth_stream

DIM = 16


def make_frames(subjects, duration_s=6.0, fps=20.0, seed=7):
    spec = SynthSpec(subjects=subjects, duration_s=duration_s, fps=fps,
                     seed=seed, dim=DIM, stream_id="test")
    return open_stream(synth_stream(spec))


def make_registry(labels, seed=7):
    registry = FaceRegistry(dimension=DIM)
    for label in labels:
        registry.add(label, subject_embedding(seed, label, DIM))
    return registry


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


# -------------------------------------------------------------- determinism


def test_two_seeded_runs_are_byte_identical(tmp_path):
    subjects = [("ada", BetaProcess(2.0, 5.0)), ("bo", BetaProcess(5.0, 2.0))]
    outputs = []
    for run in ("first", "second"):
        root = tmp_path / run
        config = PipelineConfig(output_root=str(root), window_s=1.5, seed=3,
                                scorer={"kind": "oracle_noise", "sigma": 0.05})
        summary = run_pipeline(config, frames=make_frames(subjects),
                               registry=make_registry([s[0] for s in subjects]))
        assert summary.errors == 0
        assert summary.samples_stored > 0
        assert summary.reports_written > 0
        outputs.append(tree_bytes(root))
    assert outputs[0] == outputs[1]


def test_seed_changes_the_sampled_scores(tmp_path):
    subjects = [("ada", BetaProcess(2.0, 5.0))]
    contents = []
    for seed in (1, 2):
        root = tmp_path / f"seed{seed}"
        config = PipelineConfig(output_root=str(root), window_s=2.0, seed=seed,
                                scorer={"kind": "oracle_noise", "sigma": 0.1})
        run_pipeline(config, frames=make_frames(subjects),
                     registry=make_registry(["ada"]))
        contents.append((root / "samples.jsonl").read_bytes())
    assert contents[0] != contents[1]


# ---------------------------------------------------------------- filtering


def test_unregistered_subjects_are_never_persisted(tmp_path):
    subjects = [("known", ConstantProcess(0.4)), ("stranger", ConstantProcess(0.6))]
    config = PipelineConfig(output_root=str(tmp_path / "out"), window_s=2.0)
    summary = run_pipeline(config, frames=make_frames(subjects),
                           registry=make_registry(["known"]))
    assert summary.faces_discarded > 0
    assert set(summary.samples_by_subject) == {"known"}
    stored = (tmp_path / "out" / "samples.jsonl").read_text().splitlines()
    assert stored
    assert all('"known"' in line for line in stored)
    assert not any("stranger" in line for line in stored)


def test_no_registry_discards_everything(tmp_path):
    config = PipelineConfig(output_root=str(tmp_path / "out"), window_s=2.0)
    summary = run_pipeline(config,
                           frames=make_frames([("ada", ConstantProcess(0.5))]))
    assert summary.faces_detected > 0
    assert summary.faces_matched == 0
    assert summary.samples_stored == 0
    assert summary.faces_discarded == summary.faces_detected


# ------------------------------------------------------------------ windows


def test_step_change_flags_up_in_first_full_window(tmp_path):
    subjects = [("ada", StepProcess(before=0.2, after=0.8, t_change_s=2.0))]
    config = PipelineConfig(output_root=str(tmp_path / "out"), window_s=2.0,
                            alpha=0.01)
    summary = run_pipeline(config, frames=make_frames(subjects),
                           registry=make_registry(["ada"]))
    by_end = {t_end: verdict for _, t_end, verdict in summary.verdicts}
    assert set(by_end) == {2000, 4000}
    # the boundary window has no predecessor to compare against
    assert by_end[2000].direction == "none"
    assert by_end[4000].direction == "up"
    assert by_end[4000].p_value < 0.001


def test_max_window_samples_closes_early(tmp_path):
    subjects = [("ada", ConstantProcess(0.5))]
    config = PipelineConfig(output_root=str(tmp_path / "out"), window_s=1000.0,
                            max_window_samples=10)
    summary = run_pipeline(config,
                           frames=make_frames(subjects, duration_s=10.0, fps=10.0),
                           registry=make_registry(["ada"]))
    assert summary.samples_stored == 100
    assert summary.windows_closed == 10
    assert summary.reports_written == 10


def test_trailing_partial_window_is_not_flushed(tmp_path):
    subjects = [("ada", ConstantProcess(0.5))]
    config = PipelineConfig(output_root=str(tmp_path / "out"), window_s=2.0)
    # 3 s of frames: one boundary at 2000, the tail [2000, 3000) stays open
    summary = run_pipeline(config, frames=make_frames(subjects, duration_s=3.0),
                           registry=make_registry(["ada"]))
    assert summary.windows_closed == 1
    assert summary.verdicts[0][1] == 2000


def test_stride_skips_frames(tmp_path):
    subjects = [("ada", ConstantProcess(0.5))]
    base = PipelineConfig(output_root=str(tmp_path / "a"), window_s=2.0)
    strided = PipelineConfig(output_root=str(tmp_path / "b"), window_s=2.0,
                             stride=2)
    full = run_pipeline(base, frames=make_frames(subjects),
                        registry=make_registry(["ada"]))
    half = run_pipeline(strided, frames=make_frames(subjects),
                        registry=make_registry(["ada"]))
    assert full.frames_processed == 120
    assert half.frames_processed == 60
    assert half.samples_stored == full.samples_stored // 2


# ----------------------------------------------------------- error handling


def test_scoring_error_skips_frame_and_continues(tmp_path):
    from facewatch.streams import FaceAnnotation, FaceBox, FrameRecord

    emb = subject_embedding(7, "ada", DIM)

    def frame(index, true_risk):
        note = FaceAnnotation(box=FaceBox(0, 0, 8, 8), identity_label="ada",
                              embedding=emb, true_risk=true_risk)
        return FrameRecord(stream_id="test", frame_index=index,
                           timestamp_ms=index * 50, annotations=[note])

    frames = [frame(0, None), frame(1, 0.5), frame(2, 0.5)]
    config = PipelineConfig(output_root=str(tmp_path / "out"), window_s=2.0)
    summary = run_pipeline(config, frames=frames,
                           registry=make_registry(["ada"]))
    assert summary.errors == 1
    assert "frame 0" in summary.error_log[0]
    assert summary.frames_processed == 3
    assert summary.samples_stored == 2


def test_empty_manifest_runs_to_zero(tmp_path):
    from facewatch.streams import StreamManifest

    path = save_manifest(StreamManifest(stream_id="empty", fps=30.0, entries=[]),
                         tmp_path / "empty.jsonl")
    config = PipelineConfig(output_root=str(tmp_path / "out"),
                            manifest_path=str(path))
    summary = run_pipeline(config)
    assert summary.frames_processed == 0
    assert summary.samples_stored == 0
    assert summary.reports_written == 0


def test_run_needs_a_frame_source(tmp_path):
    config = PipelineConfig(output_root=str(tmp_path / "out"))
    with pytest.raises(ConfigError):
        run_pipeline(config)


# ------------------------------------------------------------ configuration


def test_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(output_root="")
    with pytest.raises(ConfigError):
        PipelineConfig(output_root="x", manifest_path="/no/such/file")
    with pytest.raises(ConfigError):
        PipelineConfig(output_root="x", window_s=0.0)
    with pytest.raises(ConfigError):
        PipelineConfig(output_root="x", alpha=1.0)
    with pytest.raises(ConfigError):
        PipelineConfig(output_root="x", stride=0)
    with pytest.raises(ConfigError):
        PipelineConfig(output_root="x", theta_low=0.7, theta_high=0.4)
    with pytest.raises(ConfigError):
        PipelineConfig(output_root="x", bins=1)


def test_config_from_json(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"kind": "stream", "stream_id": "s"}\n')
    config = config_from_json(
        {"output_root": "out", "manifest_path": "m.jsonl", "window_s": 5.0,
         "llm": {"base_url": "http://localhost:9", "model_name": "m"}},
        base_dir=tmp_path,
    )
    assert config.manifest_path == str((tmp_path / "m.jsonl").resolve())
    assert config.window_s == 5.0
    assert config.llm.model_name == "m"
    assert config.llm.timeout_ms == 30_000
    with pytest.raises(ConfigError):
        config_from_json({"output_root": "out", "speed": 11})


# -------------------------------------------------------------- profiling


def test_profile_validates_repeats(tmp_path):
    config = PipelineConfig(output_root=str(tmp_path / "out"))
    with pytest.raises(ConfigError):
        profile(config, repeats=9)


def test_profile_reports_all_stages(tmp_path):
    config = PipelineConfig(output_root=str(tmp_path / "out"), window_s=0.5)
    timings = profile(config, repeats=30)
    assert tuple(t.stage for t in timings) == STAGES
    for timing in timings:
        assert timing.count == 25  # 30 frames minus warm-up
        assert timing.mean_ms >= 0.0
        assert timing.max_ms >= timing.p95_ms >= timing.p50_ms >= 0.0
    doc = timings_to_json(timings)
    assert doc["version"] == 1
    assert [s["stage"] for s in doc["stages"]] == list(STAGES)
