"""Command-line entry point.

Subcommands: simulate (synthetic stream through the pipeline), monitor (a
recorded manifest through the pipeline), report (on-demand subject report),
metrics (classification metrics over a score CSV), profile (per-stage
latency harness), numerics-check (the numerics oracle suite), registry
(add/list identities). A JSON config document supplies pipeline defaults;
explicit flags override its fields. --json switches machine-readable output.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from .agent import LlmEndpoint, generate_report, report_to_json
from .errors import FacewatchError, NotFoundError
from .identity import FaceRegistry, subject_embedding
from .numerics.selfcheck import run_selfcheck
from .pipeline import (
    PipelineConfig,
    RunSummary,
    config_from_json,
    profile,
    run_pipeline,
    timings_to_json,
)
from .processes import parse_process
from .records import HealthDatabase
from .scoring import confusion, metrics, roc_auc
from .streams import SynthSpec, open_stream, synth_stream


def _load_config_document(path: str | None) -> tuple[dict, Path | None]:
    if path is None:
        return {}, None
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(document, dict):
        raise FacewatchError(f"config {path} must hold a JSON object")
    return document, Path(path).parent


def _build_config(args, **forced) -> PipelineConfig:
    """Config document -> flag overrides -> forced values."""
    document, base_dir = _load_config_document(getattr(args, "config", None))
    overrides = {
        "output_root": getattr(args, "output", None),
        "manifest_path": getattr(args, "manifest", None),
        "registry_path": getattr(args, "registry", None),
        "window_s": getattr(args, "window", None),
        "alpha": getattr(args, "alpha", None),
        "tau": getattr(args, "tau", None),
        "stride": getattr(args, "stride", None),
        "seed": getattr(args, "seed", None),
        "bins": getattr(args, "bins", None),
    }
    scorer_text = getattr(args, "scorer", None)
    if scorer_text is not None:
        overrides["scorer"] = json.loads(scorer_text)
    llm_text = getattr(args, "llm", None)
    if llm_text is not None:
        overrides["llm"] = json.loads(llm_text)
    merged = dict(document)
    if base_dir is not None:
        for key in ("output_root", "manifest_path", "registry_path"):
            if merged.get(key):
                merged[key] = str((base_dir / merged[key]).resolve())
    merged.update({k: v for k, v in overrides.items() if v is not None})
    merged.update(forced)
    return config_from_json(merged)


def _print_summary(summary: RunSummary, as_json: bool):
    if as_json:
        payload = {
            "frames_processed": summary.frames_processed,
            "faces_detected": summary.faces_detected,
            "faces_matched": summary.faces_matched,
            "faces_discarded": summary.faces_discarded,
            "samples_stored": summary.samples_stored,
            "samples_by_subject": summary.samples_by_subject,
            "windows_closed": summary.windows_closed,
            "reports_written": summary.reports_written,
            "errors": summary.errors,
            "error_log": summary.error_log,
        }
        print(json.dumps(payload, indent=2))
        return
    print(f"frames processed   {summary.frames_processed}")
    print(f"faces detected     {summary.faces_detected}")
    print(f"faces matched      {summary.faces_matched}")
    print(f"faces discarded    {summary.faces_discarded}")
    print(f"samples stored     {summary.samples_stored}")
    print(f"windows closed     {summary.windows_closed}")
    print(f"reports written    {summary.reports_written}")
    print(f"errors             {summary.errors}")
    for line in summary.error_log:
        print(f"  error: {line}", file=sys.stderr)


def _cmd_simulate(args) -> int:
    subjects = []
    for item in args.subject:
        if "=" not in item:
            raise FacewatchError(
                f"--subject wants LABEL=PROCESS (e.g. alice=beta:2,5), got {item!r}"
            )
        label, process_text = item.split("=", 1)
        subjects.append((label, parse_process(process_text)))
    spec = SynthSpec(subjects=subjects, duration_s=args.duration, fps=args.fps,
                     seed=args.seed if args.seed is not None else 0, dim=args.dim)
    config = _build_config(args)
    registered = args.register if args.register else [label for label, _ in subjects]
    registry = FaceRegistry(dimension=spec.dim)
    for label in registered:
        registry.add(label, subject_embedding(spec.seed, label, spec.dim))
    summary = run_pipeline(config, frames=open_stream(synth_stream(spec)),
                           registry=registry)
    _print_summary(summary, args.json)
    return 1 if summary.errors else 0


def _cmd_monitor(args) -> int:
    config = _build_config(args)
    summary = run_pipeline(config)
    _print_summary(summary, args.json)
    return 1 if summary.errors else 0


def _cmd_report(args) -> int:
    db = HealthDatabase(Path(args.output))
    endpoint = None
    if args.llm is not None:
        data = json.loads(args.llm)
        endpoint = LlmEndpoint(base_url=data["base_url"],
                               model_name=data["model_name"],
                               timeout_ms=int(data.get("timeout_ms", 30_000)),
                               max_retries=int(data.get("max_retries", 2)))
    now_ms = args.now_ms
    if now_ms is None:
        samples = db.risk.samples_for(args.subject)
        now_ms = samples[-1].timestamp_ms + 1 if samples else 0
    ctx = db.fetch_context(args.subject, now_ms=now_ms,
                           window_ms=int(round(args.window * 1000)))
    report = generate_report(ctx, endpoint=endpoint, now_ms=now_ms)
    if args.json:
        print(json.dumps(report_to_json(report), indent=2))
    else:
        print(f"subject {args.subject}")
        print(f"level   {report.level}")
        print(report.narrative)
        for item in report.recommendations:
            print(f"- {item}")
    return 0


def _read_score_csv(path: str) -> tuple[list[float], list[int]]:
    scores, labels = [], []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or not {"score", "label"} <= set(reader.fieldnames):
            raise FacewatchError(f"{path} needs a CSV header with score,label columns")
        for row in reader:
            scores.append(float(row["score"]))
            labels.append(int(row["label"]))
    return scores, labels


def _cmd_metrics(args) -> int:
    scores, labels = _read_score_csv(args.scores)
    counts = confusion(scores, labels, threshold=args.threshold)
    result = metrics(counts)
    values = {
        "tp": counts.tp, "tn": counts.tn, "fp": counts.fp, "fn": counts.fn,
        "accuracy": result.accuracy, "precision": result.precision,
        "recall": result.recall, "f1": result.f1,
    }
    try:
        values["roc_auc"] = roc_auc(scores, labels)
    except FacewatchError:
        values["roc_auc"] = None
    if args.json:
        values["degenerate"] = sorted(result.degenerate)
        print(json.dumps(values, indent=2))
        return 0
    for name in ("tp", "tn", "fp", "fn"):
        print(f"{name} {values[name]}")
    for name in ("accuracy", "precision", "recall", "f1"):
        print(f"{name} {values[name]:g}")
    if values["roc_auc"] is not None:
        print(f"roc_auc {values['roc_auc']:g}")
    if result.degenerate:
        print(f"degenerate {','.join(sorted(result.degenerate))}")
    return 0


def _cmd_profile(args) -> int:
    config = _build_config(args)
    started = time.perf_counter()
    timings = profile(config, repeats=args.repeats)
    elapsed = time.perf_counter() - started
    fps = args.repeats / elapsed if elapsed > 0 else float("inf")
    payload = timings_to_json(timings)
    payload["frames_per_second"] = fps
    out_path = Path(config.output_root) / "profile.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    if args.json:
        print(json.dumps(payload, indent=2))
        return 0
    print(f"{'stage':<10}{'count':>7}{'mean_ms':>10}{'p50_ms':>10}{'p95_ms':>10}{'max_ms':>10}")
    for t in timings:
        print(f"{t.stage:<10}{t.count:>7}{t.mean_ms:>10.3f}{t.p50_ms:>10.3f}"
              f"{t.p95_ms:>10.3f}{t.max_ms:>10.3f}")
    print(f"frames/s {fps:.1f}")
    print(f"written {out_path}")
    return 0


def _cmd_numerics_check(args) -> int:
    results = run_selfcheck()
    if args.json:
        print(json.dumps([
            {"name": r.name, "passed": r.passed, "detail": r.detail}
            for r in results
        ], indent=2))
    else:
        for r in results:
            status = "ok  " if r.passed else "FAIL"
            print(f"{status} {r.name:<24} {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def _cmd_registry(args) -> int:
    path = Path(args.registry)
    if args.action == "list":
        registry = FaceRegistry.load(path)
        entries = [
            {"label": label, "templates": len(registry.templates(label))}
            for label in registry.labels()
        ]
        if args.json:
            print(json.dumps({"dimension": registry.dimension,
                              "entries": entries}, indent=2))
        else:
            print(f"dimension {registry.dimension}")
            for entry in entries:
                print(f"{entry['label']} ({entry['templates']} templates)")
        return 0
    # action == "add"
    if args.label is None:
        raise FacewatchError("registry add needs --label")
    if path.exists():
        registry = FaceRegistry.load(path)
    else:
        if args.dim is None:
            raise FacewatchError("creating a new registry needs --dim")
        registry = FaceRegistry(dimension=args.dim)
    if args.vector is not None:
        from .identity import FaceEmbedding

        values = [float(v) for v in args.vector.split(",")]
        embedding = FaceEmbedding.from_vector(values)
    else:
        embedding = subject_embedding(args.seed if args.seed is not None else 0,
                                      args.label, registry.dimension)
    registry.add(args.label, embedding)
    registry.save(path)
    if args.json:
        print(json.dumps({"label": args.label, "dimension": registry.dimension,
                          "templates": len(registry.templates(args.label))}))
    else:
        print(f"registered {args.label} (dim {registry.dimension})")
    return 0


def _add_pipeline_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config document")
    parser.add_argument("--output", help="output root directory")
    parser.add_argument("--window", type=float, help="window length in seconds")
    parser.add_argument("--alpha", type=float, help="change-test significance level")
    parser.add_argument("--tau", type=float, help="identity match distance threshold")
    parser.add_argument("--bins", type=int, help="histogram bin count")
    parser.add_argument("--stride", type=int, help="process every k-th frame")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--scorer", help='scorer spec JSON, e.g. {"kind":"oracle_noise","sigma":0.1}')
    parser.add_argument("--llm", help="LLM endpoint JSON (base_url, model_name, ...)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facewatch",
        description="Continuous face-keyed health-risk monitoring toolkit.",
    )
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("simulate", help="run a synthetic stream through the pipeline")
    _add_pipeline_flags(p)
    p.add_argument("--subject", action="append", default=[], required=True,
                   help="LABEL=PROCESS, e.g. alice=beta:2,5 or bob=step:0.2,0.7,30")
    p.add_argument("--register", action="append", default=[],
                   help="label to enroll (default: all subjects)")
    p.add_argument("--duration", type=float, default=60.0, help="stream length in seconds")
    p.add_argument("--fps", type=float, default=10.0)
    p.add_argument("--dim", type=int, default=16, help="embedding dimension")
    p.set_defaults(handler=_cmd_simulate)

    p = commands.add_parser("monitor", help="run a recorded manifest through the pipeline")
    _add_pipeline_flags(p)
    p.add_argument("--manifest", help="stream manifest path")
    p.add_argument("--registry", help="identity registry path")
    p.set_defaults(handler=_cmd_monitor)

    p = commands.add_parser("report", help="generate one on-demand subject report")
    p.add_argument("--output", required=True, help="database root (pipeline output root)")
    p.add_argument("--subject", required=True)
    p.add_argument("--window", type=float, default=60.0, help="window length in seconds")
    p.add_argument("--now-ms", type=int, default=None,
                   help="reference time (default: just after the latest sample)")
    p.add_argument("--llm", help="LLM endpoint JSON")
    p.set_defaults(handler=_cmd_report)

    p = commands.add_parser("metrics", help="classification metrics over a score CSV")
    p.add_argument("--scores", required=True, help="CSV with score,label columns")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(handler=_cmd_metrics)

    p = commands.add_parser("profile", help="per-stage latency harness")
    _add_pipeline_flags(p)
    p.add_argument("--manifest", help="optional manifest to profile against")
    p.add_argument("--registry", help="identity registry path")
    p.add_argument("--repeats", type=int, default=100, help="frames to process (>= 10)")
    p.set_defaults(handler=_cmd_profile)

    p = commands.add_parser("numerics-check", help="run the numerics oracle suite")
    p.set_defaults(handler=_cmd_numerics_check)

    p = commands.add_parser("registry", help="add or list identities")
    p.add_argument("action", choices=("add", "list"))
    p.add_argument("--registry", required=True, help="registry JSON path")
    p.add_argument("--label")
    p.add_argument("--dim", type=int, help="dimension when creating a new registry")
    p.add_argument("--vector", help="comma-separated embedding values")
    p.add_argument("--seed", type=int, help="seed for a synthetic identity vector")
    p.set_defaults(handler=_cmd_registry)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except NotFoundError as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return 2
    except FacewatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
