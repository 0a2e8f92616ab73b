"""Core vocabulary shared by every other module.

Severity stages, wound case records, dataset manifests, and stage
predictions. Manifests are sidecar files (CSV or JSONL) that reference
image files by path; images themselves are never embedded or decoded
here beyond an existence check.
"""

from __future__ import annotations

import csv
import enum
import functools
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence


class DomainError(Exception):
    """Base class for manifest and stage-vocabulary errors."""


class UnknownStageError(DomainError):
    def __init__(self, token: str):
        super().__init__(f"unknown stage token: {token!r}")
        self.token = token


class MissingFileError(DomainError):
    def __init__(self, path: Path):
        super().__init__(f"manifest file not found: {path}")
        self.path = Path(path)


class MalformedRowError(DomainError):
    def __init__(self, line_number: int, detail: str):
        super().__init__(f"malformed manifest row at line {line_number}: {detail}")
        self.line_number = line_number
        self.detail = detail


class DuplicateCaseIdError(DomainError):
    def __init__(self, case_id: str):
        super().__init__(f"duplicate case_id in manifest: {case_id!r}")
        self.case_id = case_id


class MissingImageError(DomainError):
    def __init__(self, path: Path):
        super().__init__(f"image file referenced by manifest does not exist: {path}")
        self.path = Path(path)


@functools.total_ordering
class StageLabel(enum.Enum):
    """Pressure ulcer severity stage.

    Exactly four values exist, totally ordered I < II < III < IV by
    depth of tissue loss. The order is load-bearing: over/under-staging
    analysis compares predicted against true stage with it.
    """

    I = 1
    II = 2
    III = 3
    IV = 4

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, StageLabel):
            return NotImplemented
        return self.value < other.value

    @property
    def canonical(self) -> str:
        """Canonical rendering, e.g. ``Stage III``."""
        return f"Stage {self.name}"

    def __str__(self) -> str:
        return self.name


STAGE_ORDER: tuple[StageLabel, ...] = (
    StageLabel.I,
    StageLabel.II,
    StageLabel.III,
    StageLabel.IV,
)

# Accepted spellings per stage: bare roman, bare arabic, "Stage <roman>".
# Matching is case-insensitive after trimming; anything else is rejected.
_STAGE_TOKENS: dict[str, StageLabel] = {}
for _label in STAGE_ORDER:
    _STAGE_TOKENS[_label.name.lower()] = _label
    _STAGE_TOKENS[str(_label.value)] = _label
    _STAGE_TOKENS[f"stage {_label.name.lower()}"] = _label


def parse_stage_token(token: str) -> StageLabel:
    """Parse a strict stage token such as ``"III"``, ``"3"`` or ``"Stage III"``.

    This is the closed-vocabulary parser used for manifests and wire
    payloads. Free-text extraction from model output lives in
    :mod:`pustage.parsing`.
    """
    key = " ".join(token.strip().lower().split())
    try:
        return _STAGE_TOKENS[key]
    except KeyError:
        raise UnknownStageError(token) from None


class PredictionSource(str, enum.Enum):
    """Which pipeline step produced a prediction."""

    GENERATOR_INITIAL = "generator_initial"
    GENERATOR_REVISED = "generator_revised"
    DECOUPLED_RATIONALE = "decoupled_rationale"


@dataclass(frozen=True)
class StagePrediction:
    """A parsed model prediction: stage plus explanatory rationale.

    ``stage`` is always a valid :class:`StageLabel`; unparseable model
    output never becomes a prediction (it is tracked separately by the
    reflection transcript and scored incorrect downstream).
    """

    stage: StageLabel
    rationale: str
    raw_model_text: str
    source: PredictionSource


@dataclass(frozen=True)
class CaseRecord:
    """One wound case: image reference, ground truth, optional note."""

    case_id: str
    image_path: Path
    true_stage: StageLabel
    clinical_note: Optional[str] = None
    source_split: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered collection of cases with derived per-stage counts."""

    cases: tuple[CaseRecord, ...]
    class_counts: Mapping[StageLabel, int] = field(default_factory=dict)

    @classmethod
    def from_cases(cls, cases: Sequence[CaseRecord]) -> "DatasetManifest":
        seen: set[str] = set()
        for case in cases:
            if case.case_id in seen:
                raise DuplicateCaseIdError(case.case_id)
            seen.add(case.case_id)
        counts = {label: 0 for label in STAGE_ORDER}
        for case in cases:
            counts[case.true_stage] += 1
        return cls(cases=tuple(cases), class_counts=counts)

    def __len__(self) -> int:
        return len(self.cases)

    def cases_for(self, stage: StageLabel) -> tuple[CaseRecord, ...]:
        return tuple(c for c in self.cases if c.true_stage == stage)

    def by_id(self) -> dict[str, CaseRecord]:
        return {c.case_id: c for c in self.cases}


_MANIFEST_FIELDS = ("case_id", "image_path", "stage", "note")


def _detect_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".ndjson"):
        return "jsonl"
    return "csv"


def _build_case(
    row: Mapping[str, object], line_number: int, base_dir: Path
) -> CaseRecord:
    for key in ("case_id", "image_path", "stage"):
        value = row.get(key)
        if value is None or str(value).strip() == "":
            raise MalformedRowError(line_number, f"missing field {key!r}")
    case_id = str(row["case_id"]).strip()
    stage = parse_stage_token(str(row["stage"]))
    image_path = Path(str(row["image_path"]))
    if not image_path.is_absolute():
        image_path = base_dir / image_path
    if not image_path.is_file():
        raise MissingImageError(image_path)
    note = row.get("note")
    note_text = str(note).strip() if note is not None else ""
    split = row.get("split")
    split_text = str(split).strip() if split is not None else ""
    return CaseRecord(
        case_id=case_id,
        image_path=image_path,
        true_stage=stage,
        clinical_note=note_text or None,
        source_split=split_text or None,
    )


def load_manifest(path: Path | str, fmt: str = "auto") -> DatasetManifest:
    """Load and validate a dataset manifest.

    CSV manifests carry the header ``case_id,image_path,stage,note``;
    JSONL manifests carry one object per line with the same keys. An
    optional ``split`` column/key tags pre-assigned folds. Relative
    image paths resolve against the manifest's directory. Row order is
    preserved.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    if fmt == "auto":
        fmt = _detect_format(path)
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unsupported manifest format: {fmt!r}")

    base_dir = path.parent
    cases: list[CaseRecord] = []
    text = path.read_text(encoding="utf-8")
    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or "case_id" not in reader.fieldnames:
            raise MalformedRowError(1, "missing or invalid CSV header")
        for line_number, row in enumerate(reader, start=2):
            if row.get("case_id") is None and all(
                v in (None, "") for v in row.values()
            ):
                continue
            cases.append(_build_case(row, line_number, base_dir))
    else:
        for line_number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRowError(line_number, f"invalid JSON: {exc.msg}") from None
            if not isinstance(row, dict):
                raise MalformedRowError(line_number, "row is not a JSON object")
            cases.append(_build_case(row, line_number, base_dir))
    return DatasetManifest.from_cases(cases)


def serialize_manifest(manifest: DatasetManifest, fmt: str = "csv") -> str:
    """Render a manifest back to its file form (UTF-8 text, LF endings)."""
    if fmt == "csv":
        buf = io.StringIO()
        fields = list(_MANIFEST_FIELDS)
        if any(c.source_split for c in manifest.cases):
            fields.append("split")
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for case in manifest.cases:
            row = {
                "case_id": case.case_id,
                "image_path": str(case.image_path),
                "stage": case.true_stage.name,
                "note": case.clinical_note or "",
            }
            if "split" in fields:
                row["split"] = case.source_split or ""
            writer.writerow(row)
        return buf.getvalue()
    if fmt == "jsonl":
        lines = []
        for case in manifest.cases:
            row: dict[str, object] = {
                "case_id": case.case_id,
                "image_path": str(case.image_path),
                "stage": case.true_stage.name,
                "note": case.clinical_note or "",
            }
            if case.source_split:
                row["split"] = case.source_split
            lines.append(json.dumps(row, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")
    raise ValueError(f"unsupported manifest format: {fmt!r}")
