"""Clinician review of predictions and rationales.

An append-only entry log records, per case and reviewer, whether the
reviewer agrees with the dataset's ground-truth stage. Rationale
quality ratings are permitted only on agreed cases; disagreements must
name one of three disagreement categories. Resubmission supersedes the
prior entry but the full history stays in the log for audit.
"""

from __future__ import annotations

import datetime as _dt
import enum
import json
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .domain import STAGE_ORDER, StageLabel


class ReviewError(Exception):
    pass


class UnknownCaseError(ReviewError):
    def __init__(self, case_id: str):
        super().__init__(f"unknown case: {case_id!r}")
        self.case_id = case_id


class InvariantViolation(ReviewError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class RationaleRating(str, enum.Enum):
    GOOD = "good"
    PASSABLE = "passable"
    BAD = "bad"


class DisagreementType(str, enum.Enum):
    MISCLASSIFICATION = "misclassification"
    HEALING_REVERSE_STAGING = "healing_reverse_staging"
    UNSTAGEABLE = "unstageable"


@dataclass(frozen=True)
class ReviewEntry:
    """One reviewer's judgment of one case.

    Invariants: a disagreement type is present exactly when the
    reviewer disagrees with the ground truth, and a rationale rating is
    permitted only when they agree (rationales are only assessable on
    cases whose label the reviewer accepts).
    """

    case_id: str
    reviewer_id: str
    agrees_with_ground_truth: bool
    disagreement_type: Optional[DisagreementType] = None
    rating: Optional[RationaleRating] = None
    notes: str = ""
    timestamp: str = ""

    def validate(self) -> None:
        if self.agrees_with_ground_truth:
            if self.disagreement_type is not None:
                raise InvariantViolation(
                    "disagreement_type is only allowed when disagreeing"
                )
        else:
            if self.disagreement_type is None:
                raise InvariantViolation("disagreement requires a disagreement_type")
            if self.rating is not None:
                raise InvariantViolation("rating requires agreement")
        if not self.case_id or not self.reviewer_id:
            raise InvariantViolation("case_id and reviewer_id are required")

    def to_json_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "reviewer_id": self.reviewer_id,
            "agrees_with_ground_truth": self.agrees_with_ground_truth,
            "disagreement_type": self.disagreement_type.value
            if self.disagreement_type
            else None,
            "rating": self.rating.value if self.rating else None,
            "notes": self.notes,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, object]) -> "ReviewEntry":
        return cls(
            case_id=str(data["case_id"]),
            reviewer_id=str(data["reviewer_id"]),
            agrees_with_ground_truth=bool(data["agrees_with_ground_truth"]),
            disagreement_type=(
                DisagreementType(str(data["disagreement_type"]))
                if data.get("disagreement_type")
                else None
            ),
            rating=(
                RationaleRating(str(data["rating"])) if data.get("rating") else None
            ),
            notes=str(data.get("notes") or ""),
            timestamp=str(data.get("timestamp") or ""),
        )


class ReviewStore:
    """Single-writer review log over a known case set.

    Entries append to an in-memory history (and optionally a JSONL log
    file); the latest entry per (case, reviewer) wins, earlier ones are
    retained as audit history. Writes serialize through a lock; reads
    are safe from any thread.
    """

    def __init__(
        self,
        case_stages: Mapping[str, StageLabel],
        log_path: Optional[Path] = None,
    ):
        self._case_stages = dict(case_stages)
        self._log_path = Path(log_path) if log_path else None
        self._entries: list[ReviewEntry] = []
        self._lock = threading.Lock()
        if self._log_path and self._log_path.exists():
            for line in self._log_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._entries.append(ReviewEntry.from_json_dict(json.loads(line)))

    @property
    def case_stages(self) -> Mapping[str, StageLabel]:
        return dict(self._case_stages)

    def submit(self, entry: ReviewEntry) -> int:
        """Validate and append an entry; returns its sequence id."""
        if entry.case_id not in self._case_stages:
            raise UnknownCaseError(entry.case_id)
        entry.validate()
        if not entry.timestamp:
            stamp = _dt.datetime.now(_dt.timezone.utc).isoformat()
            entry = replace(entry, timestamp=stamp)
        with self._lock:
            self._entries.append(entry)
            entry_id = len(self._entries)
            if self._log_path:
                with open(self._log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry.to_json_dict(), sort_keys=True) + "\n")
                    fh.flush()
        return entry_id

    def all_entries(self) -> tuple[ReviewEntry, ...]:
        """Full history, submission order, superseded entries included."""
        with self._lock:
            return tuple(self._entries)

    def latest_entries(self) -> tuple[ReviewEntry, ...]:
        """Effective entries: the last submission per (case, reviewer)."""
        latest: dict[tuple[str, str], ReviewEntry] = {}
        for entry in self.all_entries():
            latest[(entry.case_id, entry.reviewer_id)] = entry
        return tuple(latest.values())

    def reviewed_case_ids(self, reviewer_id: Optional[str] = None) -> set[str]:
        return {
            e.case_id
            for e in self.latest_entries()
            if reviewer_id is None or e.reviewer_id == reviewer_id
        }

    def export_jsonl(self) -> str:
        return "".join(
            json.dumps(e.to_json_dict(), sort_keys=True) + "\n"
            for e in self.all_entries()
        )

    @classmethod
    def import_jsonl(
        cls,
        text: str,
        case_stages: Mapping[str, StageLabel],
        log_path: Optional[Path] = None,
    ) -> "ReviewStore":
        store = cls(case_stages=case_stages, log_path=log_path)
        for line in text.splitlines():
            if line.strip():
                store.submit(ReviewEntry.from_json_dict(json.loads(line)))
        return store


def _pct(numerator: int, denominator: int) -> int:
    return round(100 * numerator / denominator) if denominator else 0


@dataclass(frozen=True)
class StageAgreement:
    total: int
    agreed: int


@dataclass(frozen=True)
class ReviewStats:
    """Aggregate view of the effective review entries.

    Rates are integer percentages; ``rates_defined`` is False when the
    store is empty (or no agreements exist for rating percentages), in
    which case the zeros are placeholders rather than measurements.
    """

    total_reviewed: int
    agreement_count: int
    agreement_rate_pct: int
    rates_defined: bool
    per_stage: Mapping[str, StageAgreement]
    rating_counts: Mapping[str, int]
    rating_pcts: Mapping[str, int]
    disagreement_counts: Mapping[str, int]
    disagreement_by_stage: Mapping[str, Mapping[str, int]]
    reviewers: tuple[str, ...]

    def to_json_dict(self) -> dict:
        return {
            "total_reviewed": self.total_reviewed,
            "agreement_count": self.agreement_count,
            "agreement_rate_pct": self.agreement_rate_pct,
            "rates_defined": self.rates_defined,
            "per_stage": {
                stage: {"total": s.total, "agreed": s.agreed}
                for stage, s in self.per_stage.items()
            },
            "rating_counts": dict(self.rating_counts),
            "rating_pcts": dict(self.rating_pcts),
            "disagreement_counts": dict(self.disagreement_counts),
            "disagreement_by_stage": {
                stage: dict(counts)
                for stage, counts in self.disagreement_by_stage.items()
            },
            "reviewers": list(self.reviewers),
        }


def aggregate(store: ReviewStore, reviewer_id: Optional[str] = None) -> ReviewStats:
    """Pure function of the entry log: replaying the log reproduces
    identical stats.

    With ``reviewer_id`` the view narrows to that reviewer; otherwise
    all effective entries aggregate together (the protocol is built
    around a single reviewer, and multi-reviewer stores should be read
    per reviewer).
    """
    entries = [
        e
        for e in store.latest_entries()
        if reviewer_id is None or e.reviewer_id == reviewer_id
    ]
    stages = store.case_stages
    total = len(entries)
    agreed = [e for e in entries if e.agrees_with_ground_truth]
    disagreed = [e for e in entries if not e.agrees_with_ground_truth]

    per_stage: dict[str, StageAgreement] = {}
    for stage in STAGE_ORDER:
        stage_entries = [e for e in entries if stages[e.case_id] == stage]
        stage_agreed = sum(1 for e in stage_entries if e.agrees_with_ground_truth)
        per_stage[stage.name] = StageAgreement(
            total=len(stage_entries), agreed=stage_agreed
        )

    rating_counts = {r.value: 0 for r in RationaleRating}
    for entry in agreed:
        if entry.rating:
            rating_counts[entry.rating.value] += 1
    rated_total = len(agreed)
    rating_pcts = {
        name: _pct(count, rated_total) for name, count in rating_counts.items()
    }

    disagreement_counts = {d.value: 0 for d in DisagreementType}
    disagreement_by_stage: dict[str, dict[str, int]] = {
        stage.name: {d.value: 0 for d in DisagreementType} for stage in STAGE_ORDER
    }
    for entry in disagreed:
        kind = entry.disagreement_type.value
        disagreement_counts[kind] += 1
        disagreement_by_stage[stages[entry.case_id].name][kind] += 1

    return ReviewStats(
        total_reviewed=total,
        agreement_count=len(agreed),
        agreement_rate_pct=_pct(len(agreed), total),
        rates_defined=total > 0,
        per_stage=per_stage,
        rating_counts=rating_counts,
        rating_pcts=rating_pcts,
        disagreement_counts=disagreement_counts,
        disagreement_by_stage=disagreement_by_stage,
        reviewers=tuple(sorted({e.reviewer_id for e in entries})),
    )
