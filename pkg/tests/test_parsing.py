"""Stage extraction rules, critique verdicts, and the re-ask fallback."""

from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pustage.backends import ModelResponse
from pustage.domain import PredictionSource, StageLabel, StagePrediction
from pustage.parsing import (
    ConfidenceKind,
    VerdictKind,
    extract_critique_verdict,
    extract_stage,
    format_prediction,
    resolve_with_reask,
)

CORPUS_PATH = Path(__file__).parent / "fixtures" / "parser_corpus.tsv"


def load_corpus() -> list[tuple[str, str]]:
    rows = []
    for line in CORPUS_PATH.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        expected, _, text = line.partition("\t")
        rows.append((expected, text.replace("\\n", "\n")))
    return rows


class TestExtractStage:
    def test_corpus_has_twenty_entries(self):
        assert len(load_corpus()) == 20

    @pytest.mark.parametrize("expected,text", load_corpus())
    def test_corpus_conformance(self, expected, text):
        outcome = extract_stage(text)
        if expected == "unparseable":
            assert outcome.stage is None
            assert outcome.confidence_kind is ConfidenceKind.UNPARSEABLE
        else:
            assert outcome.stage is StageLabel[expected]
            assert outcome.confidence_kind is not ConfidenceKind.UNPARSEABLE

    def test_layout_match_kind(self):
        outcome = extract_stage("Stage: III\nRationale: full-thickness loss")
        assert outcome.confidence_kind is ConfidenceKind.LAYOUT_MATCH
        assert outcome.rationale == "full-thickness loss"

    def test_pattern_match_kind(self):
        outcome = extract_stage("This is most consistent with Stage II here.")
        assert outcome.confidence_kind is ConfidenceKind.PATTERN_MATCH

    def test_last_pattern_occurrence_wins(self):
        text = "Could be stage II. On closer look, stage III fits the depth."
        assert extract_stage(text).stage is StageLabel.III

    def test_rationale_from_marker(self):
        outcome = extract_stage("Stage: I\nRationale: redness only, skin intact.")
        assert outcome.rationale == "redness only, skin intact."

    def test_rationale_without_marker_strips_stage_line(self):
        outcome = extract_stage("Stage: II\nThe dermis is exposed but viable.")
        assert outcome.stage is StageLabel.II
        assert outcome.rationale == "The dermis is exposed but viable."

    @settings(max_examples=200)
    @given(st.text(max_size=300))
    def test_total_over_arbitrary_text(self, text):
        outcome = extract_stage(text)
        assert (outcome.stage is None) == (
            outcome.confidence_kind is ConfidenceKind.UNPARSEABLE
        )

    @pytest.mark.parametrize("stage", list(StageLabel))
    def test_round_trip_fixed_layout(self, stage):
        prediction = StagePrediction(
            stage=stage,
            rationale="wound bed features support this stage.",
            raw_model_text="",
            source=PredictionSource.GENERATOR_INITIAL,
        )
        outcome = extract_stage(format_prediction(prediction))
        assert outcome.stage is stage
        assert outcome.rationale == prediction.rationale


class TestCritiqueVerdict:
    @pytest.mark.parametrize("text", ["OK", "ok.", "Ok!", "  OK  ", "ok"])
    def test_ok_forms(self, text):
        assert extract_critique_verdict(text).kind is VerdictKind.OK

    def test_revise_with_suggested_stage(self):
        verdict = extract_critique_verdict(
            "No bone or tendon is visible; Stage III is more appropriate."
        )
        assert verdict.kind is VerdictKind.REVISE
        assert verdict.suggested_stage is StageLabel.III
        assert "No bone" in verdict.critique_text

    def test_revise_without_stage(self):
        verdict = extract_critique_verdict("The rationale ignores the wound margins.")
        assert verdict.kind is VerdictKind.REVISE
        assert verdict.suggested_stage is None

    def test_okay_is_not_ok(self):
        assert extract_critique_verdict("Okay but reconsider").kind is VerdictKind.REVISE

    def test_ok_with_trailing_words_is_revise(self):
        assert (
            extract_critique_verdict("OK, but the depth reads as Stage III").kind
            is VerdictKind.REVISE
        )


class TestResolveWithReask:
    def test_short_circuit_when_parseable(self):
        calls = []

        def reask():
            calls.append(1)
            return ModelResponse(text="Stage I", latency=0.0)

        outcome = resolve_with_reask("Stage: IV\nRationale: depth", reask)
        assert outcome.stage is StageLabel.IV
        assert calls == []

    def test_reask_resolves(self):
        calls = []

        def reask():
            calls.append(1)
            return ModelResponse(text="Stage II", latency=0.0)

        outcome = resolve_with_reask("hard to say", reask)
        assert outcome.stage is StageLabel.II
        assert outcome.confidence_kind is ConfidenceKind.REASK_RESOLVED
        assert calls == [1]

    def test_both_unparseable_one_reask(self):
        calls = []

        def reask():
            calls.append(1)
            return ModelResponse(text="still unclear", latency=0.0)

        outcome = resolve_with_reask("no stage here", reask)
        assert outcome.stage is None
        assert outcome.confidence_kind is ConfidenceKind.UNPARSEABLE
        assert calls == [1]
