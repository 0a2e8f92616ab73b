"""Stage extraction from free-form model text.

Emulates constrained decoding post hoc for backends that lack it.
Resolution order: the fixed layout line, then inline ``stage X``
mentions (last occurrence wins, since reasoning restates candidates
before the final verdict), then a bare stage token on its own line.
Unparseable is a value, never an exception.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Callable, Optional

from .backends import ModelResponse
from .domain import StageLabel, StagePrediction

# Roman run bounded to I-IV with a hard boundary so "Stage IIIA" or
# "Stage 12" never half-match.
_TOKEN = r"(IV|I{1,3}|[1-4])(?![0-9A-Za-z])"

_LAYOUT_RE = re.compile(
    rf"^[ \t]*stage[ \t]*:[ \t]*{_TOKEN}", re.IGNORECASE | re.MULTILINE
)
_PATTERN_RE = re.compile(rf"\bstage\s+{_TOKEN}", re.IGNORECASE)
_BARE_RE = re.compile(
    rf"^[ \t]*{_TOKEN}[ \t]*[.!]?[ \t]*$", re.IGNORECASE | re.MULTILINE
)
_RATIONALE_RE = re.compile(r"rationale\s*:\s*(.*)\Z", re.IGNORECASE | re.DOTALL)

_TOKEN_TO_LABEL = {
    "i": StageLabel.I,
    "ii": StageLabel.II,
    "iii": StageLabel.III,
    "iv": StageLabel.IV,
    "1": StageLabel.I,
    "2": StageLabel.II,
    "3": StageLabel.III,
    "4": StageLabel.IV,
}


class ConfidenceKind(str, enum.Enum):
    LAYOUT_MATCH = "layout_match"
    PATTERN_MATCH = "pattern_match"
    REASK_RESOLVED = "reask_resolved"
    UNPARSEABLE = "unparseable"


@dataclass(frozen=True)
class ParseOutcome:
    stage: Optional[StageLabel]
    rationale: str
    confidence_kind: ConfidenceKind


class VerdictKind(str, enum.Enum):
    OK = "ok"
    REVISE = "revise"


@dataclass(frozen=True)
class CritiqueVerdict:
    kind: VerdictKind
    critique_text: str = ""
    suggested_stage: Optional[StageLabel] = None


def _label(token: str) -> StageLabel:
    return _TOKEN_TO_LABEL[token.lower()]


def _rationale_text(text: str, stage_line_span: Optional[tuple[int, int]]) -> str:
    marker = _RATIONALE_RE.search(text)
    if marker:
        return marker.group(1).strip()
    if stage_line_span:
        start, end = stage_line_span
        remainder = text[:start] + text[end:]
        return remainder.strip()
    return text.strip()


def _line_span(text: str, match: re.Match) -> tuple[int, int]:
    start = text.rfind("\n", 0, match.start()) + 1
    end = text.find("\n", match.end())
    end = len(text) if end == -1 else end + 1
    return start, end


def extract_stage(text: str) -> ParseOutcome:
    """Extract a stage label (and rationale) from arbitrary model text.

    Total over arbitrary input, including the empty string.
    """
    layout_matches = list(_LAYOUT_RE.finditer(text))
    if layout_matches:
        match = layout_matches[-1]
        return ParseOutcome(
            stage=_label(match.group(1)),
            rationale=_rationale_text(text, _line_span(text, match)),
            confidence_kind=ConfidenceKind.LAYOUT_MATCH,
        )
    pattern_matches = list(_PATTERN_RE.finditer(text))
    if pattern_matches:
        match = pattern_matches[-1]
        return ParseOutcome(
            stage=_label(match.group(1)),
            rationale=_rationale_text(text, None),
            confidence_kind=ConfidenceKind.PATTERN_MATCH,
        )
    bare_matches = list(_BARE_RE.finditer(text))
    if bare_matches:
        match = bare_matches[-1]
        return ParseOutcome(
            stage=_label(match.group(1)),
            rationale=_rationale_text(text, _line_span(text, match)),
            confidence_kind=ConfidenceKind.PATTERN_MATCH,
        )
    return ParseOutcome(
        stage=None,
        rationale=text.strip(),
        confidence_kind=ConfidenceKind.UNPARSEABLE,
    )


def extract_critique_verdict(text: str) -> CritiqueVerdict:
    """Classify reviewer output as approval or a revision request.

    Approval is the literal token ``OK`` (any case), optionally
    followed only by punctuation. Anything else is a revision request,
    with a suggested stage parsed from the critique when present.
    """
    trimmed = text.strip()
    if trimmed[:2].lower() == "ok":
        rest = trimmed[2:]
        if all(not ch.isalnum() for ch in rest):
            return CritiqueVerdict(kind=VerdictKind.OK)
    return CritiqueVerdict(
        kind=VerdictKind.REVISE,
        critique_text=text,
        suggested_stage=extract_stage(text).stage,
    )


def resolve_with_reask(
    text: str, reask: Callable[[], ModelResponse]
) -> ParseOutcome:
    """Parse text, falling back to exactly one constrained re-ask.

    The callback is invoked at most once, only when the first parse is
    unparseable. If the re-ask answer is also unparseable the outcome
    stays unparseable.
    """
    first = extract_stage(text)
    if first.stage is not None:
        return first
    second = extract_stage(reask().text)
    if second.stage is not None:
        return ParseOutcome(
            stage=second.stage,
            rationale=first.rationale,
            confidence_kind=ConfidenceKind.REASK_RESOLVED,
        )
    return first


def format_prediction(prediction: StagePrediction) -> str:
    """Render a prediction in the fixed layout the parser recovers."""
    return f"Stage: {prediction.stage.name}\nRationale: {prediction.rationale}"
