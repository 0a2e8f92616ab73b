"""Prompt construction for every inference mode.

All builders are pure: identical inputs (including the few-shot seed)
produce byte-identical request text. Templates live as plain-text files
with ``{slot}`` markers; an alternate template directory can be passed
to every builder for customization without code changes.
"""

from __future__ import annotations

import functools
import json
import mimetypes
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .backends import PromptRequest
from .domain import STAGE_ORDER, CaseRecord, StageLabel, StagePrediction

STAGE_ANSWER_CHOICES = tuple(label.canonical for label in STAGE_ORDER)

_SLOT_RE = re.compile(r"\{([a-z_]+)\}")

TEMPLATE_IDS = (
    "system_wound_expert",
    "zero_shot",
    "few_shot",
    "cot",
    "generator",
    "critique",
    "feedback",
    "rationale",
    "reask",
)


class PromptError(Exception):
    """Base class for prompt-construction failures."""


class ImageReadError(PromptError):
    def __init__(self, path: Path, detail: str):
        super().__init__(f"cannot read case image {path}: {detail}")
        self.path = path


class UnboundSlotError(PromptError):
    def __init__(self, template_id: str, slot: str):
        super().__init__(f"template {template_id!r} slot {slot!r} is unbound")
        self.slot = slot


class InsufficientBankError(PromptError):
    def __init__(self, stage: StageLabel, available: int, needed: int):
        super().__init__(
            f"few-shot bank has {available} usable {stage.canonical} entries, "
            f"needs {needed}"
        )
        self.stage = stage


class MissingDefinitionError(PromptError):
    def __init__(self, stage: StageLabel):
        super().__init__(f"stage definition missing for {stage.canonical}")
        self.stage = stage


class EmptyCritiqueError(PromptError):
    def __init__(self) -> None:
        super().__init__("critique text is empty; nothing to feed back")


@dataclass(frozen=True)
class PromptTemplate:
    """A text template with named ``{slot}`` markers.

    Rendering binds every discovered slot exactly once in a single
    pass, so injected values are never re-scanned for markers.
    """

    template_id: str
    role_preamble: str
    body_with_slots: str
    slots: tuple[str, ...]

    def render(self, **bindings: str) -> str:
        for slot in self.slots:
            if slot not in bindings:
                raise UnboundSlotError(self.template_id, slot)

        def substitute(match: re.Match) -> str:
            return bindings[match.group(1)]

        return _SLOT_RE.sub(substitute, self.body_with_slots)


@dataclass(frozen=True)
class TemplateSet:
    """All templates loaded from one directory."""

    templates: Mapping[str, PromptTemplate]

    def __getitem__(self, template_id: str) -> PromptTemplate:
        return self.templates[template_id]

    @property
    def preamble(self) -> str:
        return self.templates["system_wound_expert"].body_with_slots

    @classmethod
    def load(cls, directory: Optional[Path] = None) -> "TemplateSet":
        if directory is None:
            return _default_template_set()
        return cls._load_from(Path(directory))

    @classmethod
    def _load_from(cls, directory: Path) -> "TemplateSet":
        preamble = (directory / "system_wound_expert.txt").read_text(encoding="utf-8").strip()
        loaded: dict[str, PromptTemplate] = {}
        for template_id in TEMPLATE_IDS:
            body = (directory / f"{template_id}.txt").read_text(encoding="utf-8").strip()
            slots = tuple(sorted(set(_SLOT_RE.findall(body))))
            loaded[template_id] = PromptTemplate(
                template_id=template_id,
                role_preamble=preamble,
                body_with_slots=body,
                slots=slots,
            )
        return cls(templates=loaded)


@functools.lru_cache(maxsize=1)
def _default_template_set() -> TemplateSet:
    directory = resources.files("pustage") / "templates"
    with resources.as_file(directory) as path:
        return TemplateSet._load_from(Path(path))


@functools.lru_cache(maxsize=1)
def default_stage_definitions() -> dict[StageLabel, str]:
    """Per-stage clinical definitions shipped as package data."""
    raw = (resources.files("pustage") / "data" / "stage_definitions.json").read_text(
        encoding="utf-8"
    )
    data = json.loads(raw)
    return {StageLabel[name]: text for name, text in data.items()}


def read_case_image(case: CaseRecord) -> tuple[str, bytes]:
    """Read the raw image bytes and infer the MIME type from the suffix."""
    mime, _ = mimetypes.guess_type(str(case.image_path))
    if mime not in ("image/jpeg", "image/png"):
        raise ImageReadError(case.image_path, f"unsupported image type {mime!r}")
    try:
        data = case.image_path.read_bytes()
    except OSError as exc:
        raise ImageReadError(case.image_path, str(exc)) from exc
    return mime, data


def _with_note(text: str, case: CaseRecord) -> str:
    if case.clinical_note:
        return f"{text}\n\nClinical note: {case.clinical_note}"
    return text


def build_zero_shot(
    case: CaseRecord, templates: Optional[TemplateSet] = None
) -> PromptRequest:
    """Classification instruction only: one image, no support examples."""
    ts = templates or TemplateSet.load()
    return PromptRequest(
        system_text=ts.preamble,
        user_text=_with_note(ts["zero_shot"].render(), case),
        images=(read_case_image(case),),
        decode_constraint=STAGE_ANSWER_CHOICES,
    )


@dataclass(frozen=True)
class FewShotBank:
    """Pool of labeled support examples, k per class per prompt."""

    examples_per_class: int
    entries: Mapping[StageLabel, tuple[CaseRecord, ...]]

    def __post_init__(self) -> None:
        if self.examples_per_class < 1:
            raise ValueError("examples_per_class must be positive")
        for stage in STAGE_ORDER:
            available = len(self.entries.get(stage, ()))
            if available < self.examples_per_class:
                raise InsufficientBankError(stage, available, self.examples_per_class)

    @classmethod
    def from_cases(
        cls, cases: Sequence[CaseRecord], examples_per_class: int
    ) -> "FewShotBank":
        grouped: dict[StageLabel, list[CaseRecord]] = {s: [] for s in STAGE_ORDER}
        for case in cases:
            grouped[case.true_stage].append(case)
        return cls(
            examples_per_class=examples_per_class,
            entries={s: tuple(v) for s, v in grouped.items()},
        )


def build_few_shot(
    case: CaseRecord,
    bank: FewShotBank,
    seed: int,
    templates: Optional[TemplateSet] = None,
    multi_image: bool = True,
) -> PromptRequest:
    """k labeled support examples per class, ordered Stage I through IV.

    Selection is seeded sampling without replacement, never including
    the query case itself. The query image goes last on the wire.
    """
    if not multi_image:
        from .backends import MultiImageUnsupportedError

        raise MultiImageUnsupportedError()
    ts = templates or TemplateSet.load()
    rng = random.Random(seed)
    support: list[tuple[bytes, str]] = []
    for stage in STAGE_ORDER:
        eligible = [e for e in bank.entries[stage] if e.case_id != case.case_id]
        if len(eligible) < bank.examples_per_class:
            raise InsufficientBankError(stage, len(eligible), bank.examples_per_class)
        for example in rng.sample(eligible, bank.examples_per_class):
            _, data = read_case_image(example)
            support.append((data, example.true_stage.canonical))
    return PromptRequest(
        system_text=ts.preamble,
        user_text=_with_note(ts["few_shot"].render(), case),
        images=(read_case_image(case),),
        support_examples=tuple(support),
        decode_constraint=STAGE_ANSWER_CHOICES,
    )


def build_cot(
    case: CaseRecord,
    stage_definitions: Optional[Mapping[StageLabel, str]] = None,
    templates: Optional[TemplateSet] = None,
) -> PromptRequest:
    """Structured reasoning prompt: describe features first, then match
    them against the four stage definitions, then diagnose."""
    ts = templates or TemplateSet.load()
    definitions = (
        default_stage_definitions() if stage_definitions is None else stage_definitions
    )
    for stage in STAGE_ORDER:
        if stage not in definitions:
            raise MissingDefinitionError(stage)
    body = ts["cot"].render(
        def_i=definitions[StageLabel.I],
        def_ii=definitions[StageLabel.II],
        def_iii=definitions[StageLabel.III],
        def_iv=definitions[StageLabel.IV],
    )
    return PromptRequest(
        system_text=ts.preamble,
        user_text=_with_note(body, case),
        images=(read_case_image(case),),
    )


def build_generator_prompt(
    case: CaseRecord, templates: Optional[TemplateSet] = None
) -> PromptRequest:
    """Initial-pass prompt with the fixed ``Stage:/Rationale:`` layout."""
    ts = templates or TemplateSet.load()
    return PromptRequest(
        system_text=ts.preamble,
        user_text=_with_note(ts["generator"].render(), case),
        images=(read_case_image(case),),
    )


def build_critique_prompt(
    case: CaseRecord,
    prior: StagePrediction,
    templates: Optional[TemplateSet] = None,
) -> PromptRequest:
    """Audit prompt: prior stage and rationale quoted verbatim, image
    re-attached so the reviewer checks visual evidence, literal ``OK``
    as the no-change reply."""
    ts = templates or TemplateSet.load()
    body = ts["critique"].render(
        prior_stage=prior.stage.canonical,
        prior_rationale=prior.rationale,
    )
    return PromptRequest(
        system_text=ts.preamble,
        user_text=_with_note(body, case),
        images=(read_case_image(case),),
    )


def build_feedback_prompt(
    case: CaseRecord,
    prior: StagePrediction,
    critique_text: str,
    templates: Optional[TemplateSet] = None,
) -> PromptRequest:
    """Revision prompt: prior answer plus the critique in a delimited
    block, same fixed output layout as the initial pass."""
    if not critique_text.strip():
        raise EmptyCritiqueError()
    ts = templates or TemplateSet.load()
    body = ts["feedback"].render(
        prior_stage=prior.stage.name,
        prior_rationale=prior.rationale,
        critique=critique_text,
    )
    return PromptRequest(
        system_text=ts.preamble,
        user_text=_with_note(body, case),
        images=(read_case_image(case),),
    )


def build_rationale_prompt(
    case: CaseRecord,
    fixed_stage: StageLabel,
    templates: Optional[TemplateSet] = None,
) -> PromptRequest:
    """Rationale-only prompt conditioned on an already-fixed stage."""
    ts = templates or TemplateSet.load()
    body = ts["rationale"].render(stage=fixed_stage.name)
    return PromptRequest(
        system_text=ts.preamble,
        user_text=_with_note(body, case),
        images=(read_case_image(case),),
        decode_constraint=None,
    )


def build_reask_prompt(
    case: CaseRecord, templates: Optional[TemplateSet] = None
) -> PromptRequest:
    """One-shot fallback when output could not be mapped to a stage."""
    ts = templates or TemplateSet.load()
    return PromptRequest(
        system_text=ts.preamble,
        user_text=ts["reask"].render(),
        images=(read_case_image(case),),
        decode_constraint=STAGE_ANSWER_CHOICES,
    )
