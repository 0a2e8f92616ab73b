"""Generator-critic reflection engine.

One reflection run is strictly sequential: an initial generator pass,
then up to ``max_iterations`` critique rounds. A literal ``OK`` verdict
terminates early; otherwise the critique is injected back into the
generator prompt and the revised prediction becomes current. An
optional final pass hands the settled stage to a separate backend that
writes the rationale without being able to change the stage.

Every call's text and latency is captured verbatim in a transcript.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .backends import Backend, BackendError, ModelResponse
from .domain import CaseRecord, PredictionSource, StageLabel, StagePrediction
from .parsing import (
    ConfidenceKind,
    VerdictKind,
    extract_critique_verdict,
    extract_stage,
    resolve_with_reask,
)
from .prompts import (
    TemplateSet,
    build_critique_prompt,
    build_feedback_prompt,
    build_generator_prompt,
    build_rationale_prompt,
    build_reask_prompt,
    build_zero_shot,
)

TRANSCRIPT_SCHEMA_VERSION = 1


class TerminationReason(str, enum.Enum):
    CRITIC_OK = "critic_ok"
    ITERATION_CAP = "iteration_cap"
    PARSE_FAILURE = "parse_failure"


@dataclass
class ArmConfig:
    """Reflection-loop settings and backend roles.

    Generator and critic default to the same underlying model with
    different prompts; distinct handles are allowed. When
    ``decoupled_rationale`` is set, a base (non-adapted) backend writes
    the final rationale conditioned on the settled stage.
    """

    generator_backend: Backend
    critic_backend: Backend
    max_iterations: int = 2
    decoupled_rationale: bool = True
    rationale_backend: Optional[Backend] = None
    templates: Optional[TemplateSet] = None

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.decoupled_rationale and self.rationale_backend is None:
            raise ValueError(
                "decoupled_rationale requires a rationale_backend handle"
            )


@dataclass(frozen=True)
class RoundRecord:
    """One critique round: verdict plus the revision it produced."""

    critique_text: str
    verdict: VerdictKind
    revised: Optional[StagePrediction]
    iteration_latency: float


@dataclass(frozen=True)
class ReflectionTranscript:
    """Full record of one reflection run for a single case.

    ``terminated_by`` is None only inside a :class:`ReflectionBackendError`
    carrying a partial transcript for post-mortem inspection.
    """

    case_id: str
    initial: Optional[StagePrediction]
    rounds: tuple[RoundRecord, ...]
    final: Optional[StagePrediction]
    terminated_by: Optional[TerminationReason]
    total_latency: float
    per_call_latencies: tuple[float, ...]
    unparsed_text: Optional[str] = None

    def to_json_dict(self) -> dict:
        def prediction(p: Optional[StagePrediction]) -> Optional[dict]:
            if p is None:
                return None
            return {
                "stage": p.stage.name,
                "rationale": p.rationale,
                "raw_model_text": p.raw_model_text,
                "source": p.source.value,
            }

        return {
            "schema_version": TRANSCRIPT_SCHEMA_VERSION,
            "case_id": self.case_id,
            "initial": prediction(self.initial),
            "rounds": [
                {
                    "critique_text": r.critique_text,
                    "verdict": r.verdict.value,
                    "revised": prediction(r.revised),
                    "iteration_latency": r.iteration_latency,
                }
                for r in self.rounds
            ],
            "final": prediction(self.final),
            "terminated_by": self.terminated_by.value if self.terminated_by else None,
            "total_latency": self.total_latency,
            "per_call_latencies": list(self.per_call_latencies),
            "unparsed_text": self.unparsed_text,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ReflectionTranscript":
        def prediction(d: Optional[dict]) -> Optional[StagePrediction]:
            if d is None:
                return None
            return StagePrediction(
                stage=StageLabel[d["stage"]],
                rationale=d["rationale"],
                raw_model_text=d["raw_model_text"],
                source=PredictionSource(d["source"]),
            )

        return cls(
            case_id=data["case_id"],
            initial=prediction(data.get("initial")),
            rounds=tuple(
                RoundRecord(
                    critique_text=r["critique_text"],
                    verdict=VerdictKind(r["verdict"]),
                    revised=prediction(r.get("revised")),
                    iteration_latency=r["iteration_latency"],
                )
                for r in data.get("rounds", ())
            ),
            final=prediction(data.get("final")),
            terminated_by=(
                TerminationReason(data["terminated_by"])
                if data.get("terminated_by")
                else None
            ),
            total_latency=data["total_latency"],
            per_call_latencies=tuple(data.get("per_call_latencies", ())),
            unparsed_text=data.get("unparsed_text"),
        )

    def to_jsonl_line(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


class ReflectionBackendError(Exception):
    """A backend call failed mid-run; the partial transcript survives."""

    def __init__(
        self, call_index: int, partial: ReflectionTranscript, cause: BackendError
    ):
        super().__init__(f"backend call {call_index} failed: {cause}")
        self.call_index = call_index
        self.partial_transcript = partial
        self.cause = cause


class _Run:
    """Mutable state of one reflection run (single-threaded)."""

    def __init__(self, case: CaseRecord, config: ArmConfig):
        self.case = case
        self.config = config
        self.latencies: list[float] = []
        self.initial: Optional[StagePrediction] = None
        self.rounds: list[RoundRecord] = []
        self.final: Optional[StagePrediction] = None
        self.unparsed_text: Optional[str] = None

    def call(self, backend: Backend, request) -> ModelResponse:
        try:
            response = backend.complete(request)
        except BackendError as exc:
            raise ReflectionBackendError(
                call_index=len(self.latencies),
                partial=self.snapshot(terminated_by=None),
                cause=exc,
            ) from exc
        self.latencies.append(response.latency)
        return response

    def snapshot(
        self, terminated_by: Optional[TerminationReason]
    ) -> ReflectionTranscript:
        return ReflectionTranscript(
            case_id=self.case.case_id,
            initial=self.initial,
            rounds=tuple(self.rounds),
            final=self.final,
            terminated_by=terminated_by,
            total_latency=sum(self.latencies),
            per_call_latencies=tuple(self.latencies),
            unparsed_text=self.unparsed_text,
        )


def run_reflection(case: CaseRecord, config: ArmConfig) -> ReflectionTranscript:
    """Execute the bounded generator-critic loop for one case.

    Initial pass, then up to ``max_iterations`` rounds of critique; an
    ``OK`` verdict stops early, otherwise the critique is fed back and
    the revision re-critiqued. An unparseable initial answer (after one
    re-ask) terminates with ``parse_failure`` and no stage; the case is
    retained and scored incorrect downstream rather than dropped.
    """
    templates = config.templates
    run = _Run(case, config)
    generator = config.generator_backend
    reask = lambda: run.call(generator, build_reask_prompt(case, templates))

    initial_response = run.call(generator, build_generator_prompt(case, templates))
    outcome = resolve_with_reask(initial_response.text, reask)
    if outcome.stage is None:
        run.unparsed_text = initial_response.text
        return run.snapshot(TerminationReason.PARSE_FAILURE)

    current = StagePrediction(
        stage=outcome.stage,
        rationale=outcome.rationale,
        raw_model_text=initial_response.text,
        source=PredictionSource.GENERATOR_INITIAL,
    )
    run.initial = current
    run.final = current

    terminated = TerminationReason.ITERATION_CAP
    for _ in range(config.max_iterations):
        round_start = len(run.latencies)
        critique_response = run.call(
            config.critic_backend, build_critique_prompt(case, current, templates)
        )
        verdict = extract_critique_verdict(critique_response.text)
        if verdict.kind is VerdictKind.OK:
            run.rounds.append(
                RoundRecord(
                    critique_text=critique_response.text,
                    verdict=VerdictKind.OK,
                    revised=None,
                    iteration_latency=sum(run.latencies[round_start:]),
                )
            )
            terminated = TerminationReason.CRITIC_OK
            break

        revised: Optional[StagePrediction] = None
        if verdict.critique_text.strip():
            feedback_response = run.call(
                generator,
                build_feedback_prompt(case, current, critique_response.text, templates),
            )
            revision = resolve_with_reask(feedback_response.text, reask)
            if revision.stage is not None:
                revised = StagePrediction(
                    stage=revision.stage,
                    rationale=revision.rationale,
                    raw_model_text=feedback_response.text,
                    source=PredictionSource.GENERATOR_REVISED,
                )
        run.rounds.append(
            RoundRecord(
                critique_text=critique_response.text,
                verdict=VerdictKind.REVISE,
                revised=revised,
                iteration_latency=sum(run.latencies[round_start:]),
            )
        )
        if revised is not None:
            current = revised
            run.final = current

    if config.decoupled_rationale:
        rationale_response = run.call(
            config.rationale_backend,
            build_rationale_prompt(case, current.stage, templates),
        )
        run.final = StagePrediction(
            stage=current.stage,
            rationale=rationale_response.text.strip(),
            raw_model_text=rationale_response.text,
            source=PredictionSource.DECOUPLED_RATIONALE,
        )

    return run.snapshot(terminated)


def run_decoupled_inference(
    case: CaseRecord,
    classifier_backend: Backend,
    rationale_backend: Backend,
    templates: Optional[TemplateSet] = None,
) -> Optional[StagePrediction]:
    """Two-call strategy: one backend fixes the stage, another writes
    the rationale conditioned on it.

    The rationale call can never change the stage. Returns None when
    the classifier output stays unparseable after one re-ask; no
    rationale call is made in that situation.
    """
    classification = classifier_backend.complete(build_zero_shot(case, templates))
    outcome = resolve_with_reask(
        classification.text,
        lambda: classifier_backend.complete(build_reask_prompt(case, templates)),
    )
    if outcome.stage is None:
        return None
    rationale_response = rationale_backend.complete(
        build_rationale_prompt(case, outcome.stage, templates)
    )
    return StagePrediction(
        stage=outcome.stage,
        rationale=rationale_response.text.strip(),
        raw_model_text=classification.text,
        source=PredictionSource.DECOUPLED_RATIONALE,
    )


@dataclass(frozen=True)
class TimingRow:
    """Latency statistics for one iteration index across transcripts."""

    iteration: int
    sample_count: int
    mean: float
    stdev: float
    stdev_degenerate: bool
    cumulative: float


def timing_summary(transcripts: Sequence[ReflectionTranscript]) -> tuple[TimingRow, ...]:
    """Per-iteration mean and sample stdev, with a running cumulative.

    Iteration i aggregates ``iteration_latency`` over transcripts that
    reached at least i rounds. The cumulative column is the exact
    prefix sum of the means. A single-sample stdev is reported as 0 and
    flagged degenerate.
    """
    max_rounds = max((len(t.rounds) for t in transcripts), default=0)
    rows: list[TimingRow] = []
    running = 0.0
    for index in range(max_rounds):
        samples = [
            t.rounds[index].iteration_latency for t in transcripts if len(t.rounds) > index
        ]
        n = len(samples)
        mean = sum(samples) / n
        if n >= 2:
            variance = sum((x - mean) ** 2 for x in samples) / (n - 1)
            stdev = math.sqrt(variance)
            degenerate = False
        else:
            stdev = 0.0
            degenerate = True
        running += mean
        rows.append(
            TimingRow(
                iteration=index + 1,
                sample_count=n,
                mean=mean,
                stdev=stdev,
                stdev_degenerate=degenerate,
                cumulative=running,
            )
        )
    return tuple(rows)


def format_timing_table(rows: Sequence[TimingRow]) -> str:
    """Fixed-width rendering of a timing summary."""
    lines = ["Iteration  Time (s) per Iteration  Cumulative Time (s)"]
    for row in rows:
        per_iteration = f"{row.mean:.2f} ± {row.stdev:.2f}"
        if row.stdev_degenerate:
            per_iteration += " (n=1)"
        lines.append(f"{row.iteration:<9d}  {per_iteration:<22}  {row.cumulative:.2f}")
    return "\n".join(lines) + "\n"
