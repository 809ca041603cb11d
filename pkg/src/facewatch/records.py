"""Personalized health-record database: subject profiles linked to risk series.

Storage is deliberately plain: one JSON document per subject under the
database root plus the append-only JSONL risk series, so everything is
human-inspectable and diffable. Each document carries a version field; there
is no migration framework.
"""

from __future__ import annotations

import json
import threading
import urllib.parse
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from .analytics import RiskStore, change_test, window_stats
from .errors import NotFoundError, RegistryError, StoreError
from .identity import FaceRegistry

if TYPE_CHECKING:
    from .agent import ReportContext

PROFILE_VERSION = 1


@dataclass
class HealthRecord:
    subject_id: str
    chief_complaint: str = ""
    age_years: int | None = None
    sex: str | None = None
    history: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.subject_id:
            raise StoreError("subject_id must be non-empty")
        if self.age_years is not None and not 18 <= self.age_years <= 120:
            raise StoreError(f"age_years must lie in [18,120], got {self.age_years}")
        self.history = [(int(ts), str(note)) for ts, note in self.history]
        if self.history != sorted(self.history, key=lambda item: item[0]):
            raise StoreError("history must be sorted by timestamp")


@dataclass
class SubjectProfile:
    subject_id: str
    registry_label: str
    health_record: HealthRecord
    created_ms: int = 0

    def __post_init__(self):
        if not self.subject_id:
            raise StoreError("subject_id must be non-empty")
        if self.health_record.subject_id != self.subject_id:
            raise StoreError(
                f"health record subject {self.health_record.subject_id!r} "
                f"!= profile subject {self.subject_id!r}"
            )


def _profile_to_json(profile: SubjectProfile) -> dict:
    record = profile.health_record
    return {
        "version": PROFILE_VERSION,
        "subject_id": profile.subject_id,
        "registry_label": profile.registry_label,
        "created_ms": profile.created_ms,
        "health_record": {
            "subject_id": record.subject_id,
            "chief_complaint": record.chief_complaint,
            "age_years": record.age_years,
            "sex": record.sex,
            "history": [[ts, note] for ts, note in record.history],
        },
    }


def _profile_from_json(doc: dict) -> SubjectProfile:
    record_doc = doc["health_record"]
    record = HealthRecord(
        subject_id=record_doc["subject_id"],
        chief_complaint=record_doc.get("chief_complaint", ""),
        age_years=record_doc.get("age_years"),
        sex=record_doc.get("sex"),
        history=[(ts, note) for ts, note in record_doc.get("history", [])],
    )
    return SubjectProfile(
        subject_id=doc["subject_id"],
        registry_label=doc["registry_label"],
        health_record=record,
        created_ms=int(doc.get("created_ms", 0)),
    )


class HealthDatabase:
    """Subject profiles plus the risk-sample series under one content root."""

    def __init__(self, root, batch_size: int = 1):
        self.root = Path(root)
        self.profiles_dir = self.root / "profiles"
        self.profiles_dir.mkdir(parents=True, exist_ok=True)
        self.risk = RiskStore(self.root / "samples.jsonl", batch_size=batch_size)
        self._locks: dict[str, threading.Lock] = {}
        self._meta_lock = threading.Lock()

    def _subject_lock(self, subject_id: str) -> threading.Lock:
        with self._meta_lock:
            return self._locks.setdefault(subject_id, threading.Lock())

    def _profile_path(self, subject_id: str) -> Path:
        return self.profiles_dir / (urllib.parse.quote(subject_id, safe="") + ".json")

    def upsert_profile(self, profile: SubjectProfile, registry: FaceRegistry | None = None) -> None:
        """Persist a profile; idempotent for identical content, last write wins.

        When a registry is supplied, the profile's registry_label must exist
        in it (the link-time invariant).
        """
        if registry is not None and profile.registry_label not in registry.labels():
            raise RegistryError(
                f"registry_label {profile.registry_label!r} not present in registry"
            )
        path = self._profile_path(profile.subject_id)
        with self._subject_lock(profile.subject_id):
            path.write_text(json.dumps(_profile_to_json(profile), indent=2) + "\n",
                            encoding="utf-8")

    def has_profile(self, subject_id: str) -> bool:
        return self._profile_path(subject_id).exists()

    def get_profile(self, subject_id: str) -> SubjectProfile:
        path = self._profile_path(subject_id)
        if not path.exists():
            raise NotFoundError(f"no profile for subject {subject_id!r}")
        try:
            return _profile_from_json(json.loads(path.read_text(encoding="utf-8")))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise StoreError(f"malformed profile document {path}: {exc}") from exc

    def list_subjects(self) -> list[str]:
        return sorted(
            urllib.parse.unquote(p.stem) for p in self.profiles_dir.glob("*.json")
        )

    def fetch_context(
        self,
        subject_id: str,
        now_ms: int,
        window_ms: int,
        bins: int | None = None,
        alpha: float = 0.01,
        theta_low: float | None = None,
        theta_high: float | None = None,
    ) -> "ReportContext":
        """Assemble the report inputs for one subject at a reference time.

        The current window is [now - T, now), the previous [now - 2T, now - T);
        every stored sample in [now - 2T, now) lands in exactly one of them.
        Empty windows are flagged, not fatal. Never mutates the store.
        """
        from .agent import LEVEL_HIGH_THRESHOLD, LEVEL_LOW_THRESHOLD, ReportContext
        from .analytics import DEFAULT_BINS

        if window_ms <= 0:
            raise ValueError(f"window_ms must be positive, got {window_ms}")
        bins = DEFAULT_BINS if bins is None else bins
        theta_low = LEVEL_LOW_THRESHOLD if theta_low is None else theta_low
        theta_high = LEVEL_HIGH_THRESHOLD if theta_high is None else theta_high
        profile = self.get_profile(subject_id)
        prev_samples = self.risk.samples_between(subject_id, now_ms - 2 * window_ms,
                                                 now_ms - window_ms)
        curr_samples = self.risk.samples_between(subject_id, now_ms - window_ms, now_ms)
        previous = window_stats(prev_samples, bins=bins,
                                t_start=now_ms - 2 * window_ms, t_end=now_ms - window_ms)
        current = window_stats(curr_samples, bins=bins,
                               t_start=now_ms - window_ms, t_end=now_ms)
        verdict = change_test(prev_samples, curr_samples, alpha=alpha, bins=bins)
        if current.count > 0:
            patient_level = current.mean
        elif previous.count > 0:
            patient_level = previous.mean
        else:
            patient_level = 0.0
        return ReportContext(
            profile=profile,
            current=current,
            previous=previous,
            verdict=verdict,
            patient_level=float(patient_level),
            theta_low=theta_low,
            theta_high=theta_high,
        )
