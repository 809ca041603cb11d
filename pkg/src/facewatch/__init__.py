"""facewatch: continuous face-keyed health-risk monitoring at desk scale.

Video frames (or synthetic stands-ins) flow through face detection, identity
matching against an enrolled registry, pluggable risk scoring, an append-only
longitudinal store, windowed change detection, and template- or LLM-written
risk reports. A separate numerics package holds the oracle-verified model
mathematics (patch encoder, vector quantization, masked prediction losses,
patch relevance maps).
"""

from .agent import (
    LEVEL_HIGH_THRESHOLD,
    LEVEL_LOW_THRESHOLD,
    LlmEndpoint,
    ReportContext,
    RiskReport,
    build_prompt,
    classify_level,
    generate_report,
    llm_complete,
)
from .analytics import (
    ChangeVerdict,
    RiskSample,
    RiskStore,
    WindowStats,
    change_test,
    kl_divergence,
    mann_whitney_u,
    patient_level_score,
    stability_curve,
    window_stats,
)
from .errors import FacewatchError
from .identity import (
    FaceBox,
    FaceEmbedding,
    FaceRegistry,
    MatchResult,
    detect_faces,
    embed,
    match_identity,
    register_face,
    subject_embedding,
)
from .pipeline import (
    PipelineConfig,
    RunSummary,
    StageTiming,
    config_from_json,
    profile,
    run_pipeline,
)
from .processes import BetaProcess, ConstantProcess, StepProcess, parse_process
from .records import HealthDatabase, HealthRecord, SubjectProfile
from .scoring import (
    ConfusionCounts,
    MetricsResult,
    RiskScore,
    ScoreRequest,
    build_scorer,
    confusion,
    metrics,
    roc_auc,
    roc_points,
    score,
)
from .streams import (
    FaceAnnotation,
    FrameRecord,
    StreamManifest,
    SynthSpec,
    load_manifest,
    open_stream,
    save_manifest,
    synth_stream,
)

__version__ = "0.1.0"

__all__ = [
    "LEVEL_HIGH_THRESHOLD", "LEVEL_LOW_THRESHOLD", "LlmEndpoint",
    "ReportContext", "RiskReport", "build_prompt", "classify_level",
    "generate_report", "llm_complete",
    "ChangeVerdict", "RiskSample", "RiskStore", "WindowStats", "change_test",
    "kl_divergence", "mann_whitney_u", "patient_level_score",
    "stability_curve", "window_stats",
    "FacewatchError",
    "FaceBox", "FaceEmbedding", "FaceRegistry", "MatchResult", "detect_faces",
    "embed", "match_identity", "register_face", "subject_embedding",
    "PipelineConfig", "RunSummary", "StageTiming", "config_from_json",
    "profile", "run_pipeline",
    "BetaProcess", "ConstantProcess", "StepProcess", "parse_process",
    "HealthDatabase", "HealthRecord", "SubjectProfile",
    "ConfusionCounts", "MetricsResult", "RiskScore", "ScoreRequest",
    "build_scorer", "confusion", "metrics", "roc_auc", "roc_points", "score",
    "FaceAnnotation", "FrameRecord", "StreamManifest", "SynthSpec",
    "load_manifest", "open_stream", "save_manifest", "synth_stream",
    "__version__",
]
