"""Risk-report generation: rule-based level, templated prompt, optional LLM narrative.

The risk level is always decided by a deterministic rule over the assembled
context; a language model, when configured, only writes the narrative. On any
endpoint failure the report degrades to the built-in template instead of
raising, with the failure noted in the report provenance.
"""

from __future__ import annotations

import json
import os
import string
import time
from dataclasses import dataclass
from typing import Callable

import requests

from .analytics import ChangeVerdict, WindowStats
from .errors import ConfigError, ProtocolError, TemplateError, TransportError
from .records import SubjectProfile

LEVEL_LOW_THRESHOLD = 0.35
LEVEL_HIGH_THRESHOLD = 0.65

TOKEN_ENV_VAR = "FACEWATCH_LLM_TOKEN"
RETRY_BACKOFF_BASE_MS = 500

PLACEHOLDERS = frozenset({
    "subject_id", "age", "sex", "chief_complaint", "mean_now", "mean_prev",
    "direction", "p_value", "kl", "patient_level", "level",
})

DEFAULT_SYSTEM_PROMPT = (
    "You are a cautious health-monitoring assistant. Summarize the observed "
    "risk trend for a lay reader, stay factual, and never contradict the "
    "precomputed risk level."
)

DEFAULT_PROMPT_TEMPLATE = """\
Write a short wellness report for subject {subject_id} (age {age}, sex {sex}).
Chief complaint on file: {chief_complaint}.
Observed facial risk, current window mean: {mean_now} (previous window: {mean_prev}).
Trend test: direction {direction}, p-value {p_value}, distribution divergence {kl}.
Aggregated subject-level risk: {patient_level}.
Assessed risk level (do not change it): {level}.
Explain the trend in plain language and close with general wellness advice.
"""

DEFAULT_NARRATIVE_TEMPLATE = """\
Risk summary for subject {subject_id} (age {age}, sex {sex}).
Chief complaint: {chief_complaint}.
The mean risk over the current window is {mean_now}, compared with {mean_prev} over the previous window.
The trend is assessed as "{direction}" (p-value {p_value}, divergence {kl}).
The aggregated subject-level risk is {patient_level}, which maps to a {level} risk level.
"""

RECOMMENDATIONS = {
    "low": [
        "Maintain current lifestyle and activity habits.",
        "Continue passive monitoring; no action needed.",
    ],
    "moderate": [
        "Watch for new symptoms such as chest discomfort or shortness of breath.",
        "Consider scheduling a routine check-up.",
        "Review modifiable habits: diet, exercise, sleep and smoking.",
    ],
    "high": [
        "Arrange a clinical evaluation promptly.",
        "Share this monitoring summary and the chief complaint with the clinician.",
        "Avoid strenuous exertion until a professional assessment is done.",
    ],
}


@dataclass
class ReportContext:
    """Everything the report generator consumes, assembled by the record store."""

    profile: SubjectProfile
    current: WindowStats
    previous: WindowStats
    verdict: ChangeVerdict
    patient_level: float
    theta_low: float = LEVEL_LOW_THRESHOLD
    theta_high: float = LEVEL_HIGH_THRESHOLD

    def __post_init__(self):
        if not 0.0 <= self.theta_low < self.theta_high <= 1.0:
            raise ConfigError(
                f"need 0 <= theta_low < theta_high <= 1, got ({self.theta_low}, {self.theta_high})"
            )


@dataclass
class RiskReport:
    level: str  # "low" | "moderate" | "high"
    narrative: str
    recommendations: list[str]
    provenance: list[tuple[str, str]]
    generated_ms: int
    generator: str  # "llm" | "template"


@dataclass
class LlmEndpoint:
    """Wire-level description of a chat-completion server."""

    base_url: str
    model_name: str
    timeout_ms: int = 30_000
    max_retries: int = 2

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ConfigError(f"timeout_ms must be positive, got {self.timeout_ms}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")


def classify_level(ctx: ReportContext) -> str:
    """Deterministic risk level from the aggregate and the trend direction.

    high: aggregate >= theta_high, or a significant upward trend with the
    aggregate at least theta_low. low: aggregate under theta_low without an
    upward trend. moderate: everything else.
    """
    up = ctx.verdict.direction == "up"
    if ctx.patient_level >= ctx.theta_high or (up and ctx.patient_level >= ctx.theta_low):
        return "high"
    if ctx.patient_level < ctx.theta_low and not up:
        return "low"
    return "moderate"


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def context_fields(ctx: ReportContext) -> dict[str, str]:
    """Render every known placeholder from a context."""
    record = ctx.profile.health_record
    return {
        "subject_id": ctx.profile.subject_id,
        "age": "unknown" if record.age_years is None else str(record.age_years),
        "sex": record.sex or "unspecified",
        "chief_complaint": record.chief_complaint or "none recorded",
        "mean_now": _fmt(ctx.current.mean),
        "mean_prev": _fmt(ctx.previous.mean),
        "direction": ctx.verdict.direction,
        "p_value": _fmt(ctx.verdict.p_value),
        "kl": _fmt(ctx.verdict.kl),
        "patient_level": _fmt(ctx.patient_level),
        "level": classify_level(ctx),
    }


def build_prompt(ctx: ReportContext, template: str = DEFAULT_PROMPT_TEMPLATE) -> str:
    """Substitute context fields into a template; numeric fields get 3 decimals.

    An unknown placeholder raises TemplateError naming it, before any network
    traffic can happen.
    """
    referenced = set()
    for _, name, _, _ in string.Formatter().parse(template):
        if name is None:
            continue
        base = name.split(".")[0].split("[")[0]
        if base not in PLACEHOLDERS:
            raise TemplateError(f"unknown placeholder {name!r}")
        referenced.add(base)
    fields = context_fields(ctx)
    return template.format(**{name: fields[name] for name in referenced})


def llm_complete(
    endpoint: LlmEndpoint,
    prompt: str,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
    _sleep: Callable[[float], None] = time.sleep,
) -> str:
    """POST one chat completion and return the first message content.

    Transport failures (connection errors, timeouts, non-2xx) are retried up
    to max_retries with exponential backoff; a malformed response body is a
    protocol error and is not retried.
    """
    url = endpoint.base_url.rstrip("/") + "/v1/chat/completions"
    body = {
        "model": endpoint.model_name,
        "messages": [
            {"role": "system", "content": system_prompt},
            {"role": "user", "content": prompt},
        ],
        "temperature": 0,
    }
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(TOKEN_ENV_VAR)
    if token:
        headers["Authorization"] = f"Bearer {token}"

    last_failure = "no attempt made"
    for attempt in range(endpoint.max_retries + 1):
        if attempt > 0:
            _sleep(RETRY_BACKOFF_BASE_MS / 1000.0 * 2 ** (attempt - 1))
        try:
            response = requests.post(url, json=body, headers=headers,
                                      timeout=endpoint.timeout_ms / 1000.0)
        except requests.RequestException as exc:
            last_failure = f"transport failure: {exc}"
            continue
        if response.status_code < 200 or response.status_code >= 300:
            last_failure = f"HTTP {response.status_code}"
            continue
        try:
            payload = response.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion body: {exc}") from exc
        if not isinstance(content, str):
            raise ProtocolError(f"completion content is not text: {type(content).__name__}")
        return content
    raise TransportError(f"giving up after {endpoint.max_retries + 1} attempts ({last_failure})")


def generate_report(
    ctx: ReportContext,
    endpoint: LlmEndpoint | None = None,
    now_ms: int | None = None,
    _sleep: Callable[[float], None] = time.sleep,
) -> RiskReport:
    """Produce a RiskReport; degrades to the template narrative on LLM failure.

    The level always comes from classify_level, never from LLM text. `now_ms`
    pins the report timestamp for deterministic pipeline output.
    """
    fields = context_fields(ctx)
    level = fields["level"]
    provenance = sorted(fields.items())
    provenance.append(("theta_low", f"{ctx.theta_low:.3f}"))
    provenance.append(("theta_high", f"{ctx.theta_high:.3f}"))
    provenance.append(("current_window_count", str(ctx.current.count)))
    provenance.append(("previous_window_count", str(ctx.previous.count)))

    narrative = None
    generator = "template"
    if endpoint is not None:
        try:
            narrative = llm_complete(endpoint, build_prompt(ctx), _sleep=_sleep)
            generator = "llm"
        except (TransportError, ProtocolError) as exc:
            provenance.append(("degraded", f"llm unavailable: {exc}"))
    if narrative is None:
        narrative = build_prompt(ctx, DEFAULT_NARRATIVE_TEMPLATE)

    return RiskReport(
        level=level,
        narrative=narrative,
        recommendations=list(RECOMMENDATIONS[level]),
        provenance=provenance,
        generated_ms=int(time.time() * 1000) if now_ms is None else now_ms,
        generator=generator,
    )


def report_to_json(report: RiskReport) -> dict:
    return {
        "level": report.level,
        "narrative": report.narrative,
        "recommendations": report.recommendations,
        "provenance": [[name, value] for name, value in report.provenance],
        "generated_ms": report.generated_ms,
        "generator": report.generator,
    }
