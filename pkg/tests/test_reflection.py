"""Reflection loop conformance, decoupled inference, timing summaries."""

import json
import statistics

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from pustage.backends import ModelResponse, NoScriptMatchError, ScriptEntry, ScriptedBackend
from pustage.domain import CaseRecord, StageLabel
from pustage.parsing import VerdictKind
from pustage.reflection import (
    ArmConfig,
    ReflectionBackendError,
    ReflectionTranscript,
    RoundRecord,
    TerminationReason,
    format_timing_table,
    run_decoupled_inference,
    run_reflection,
    timing_summary,
)

GENERATOR_MARKER = "Answer using exactly this layout"
CRITIQUE_MARKER = "Prior stage:"
FEEDBACK_MARKER = "--- critique ---"


@pytest.fixture
def case(stage_images):
    return CaseRecord(
        case_id="case-01",
        image_path=stage_images[StageLabel.III],
        true_stage=StageLabel.III,
    )


class FnBackend:
    """Backend driven by a function of the call index; for property tests."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0
        self.backend_id = "fn"
        self.supports_multi_image = True

    def complete(self, request) -> ModelResponse:
        text = self.fn(self.calls, request)
        self.calls += 1
        return ModelResponse(text=text, latency=0.0, backend_id=self.backend_id)


class TestRunReflection:
    def test_revision_scenario(self, case):
        """Initial IV, critique suggests III, revision accepted on round 2."""
        generator = ScriptedBackend(
            [
                ScriptEntry(match=GENERATOR_MARKER, text="Stage IV — slough and depth", once=True),
                ScriptEntry(
                    match=FEEDBACK_MARKER,
                    text="Stage: III\nRationale: full-thickness loss without exposed bone.",
                ),
            ]
        )
        critic = ScriptedBackend(
            [
                ScriptEntry(
                    match="Prior stage: Stage IV",
                    text="No bone or tendon is visible; Stage III is more appropriate.",
                ),
                ScriptEntry(match="Prior stage: Stage III", text="OK"),
            ]
        )
        config = ArmConfig(
            generator_backend=generator,
            critic_backend=critic,
            max_iterations=2,
            decoupled_rationale=False,
        )
        transcript = run_reflection(case, config)
        assert transcript.final.stage is StageLabel.III
        assert transcript.terminated_by is TerminationReason.CRITIC_OK
        assert len(transcript.rounds) == 2
        assert transcript.rounds[0].verdict is VerdictKind.REVISE
        assert transcript.rounds[0].revised.stage is StageLabel.III
        assert transcript.rounds[1].verdict is VerdictKind.OK
        assert transcript.initial.stage is StageLabel.IV

    def test_immediate_ok(self, case):
        generator = ScriptedBackend(
            [ScriptEntry(match=GENERATOR_MARKER, text="Stage: I\nRationale: intact skin.")]
        )
        critic = ScriptedBackend([ScriptEntry(match=CRITIQUE_MARKER, text="OK")])
        config = ArmConfig(
            generator_backend=generator,
            critic_backend=critic,
            max_iterations=2,
            decoupled_rationale=False,
        )
        transcript = run_reflection(case, config)
        assert transcript.final == transcript.initial
        assert len(transcript.rounds) == 1
        assert transcript.terminated_by is TerminationReason.CRITIC_OK

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_never_ok_hits_iteration_cap(self, case, n):
        generator = ScriptedBackend(
            [
                ScriptEntry(match=GENERATOR_MARKER, text="Stage: II\nRationale: dermis exposed.", once=True),
                ScriptEntry(match=FEEDBACK_MARKER, text="Stage: II\nRationale: unchanged."),
            ]
        )
        critic = ScriptedBackend(
            [ScriptEntry(match=CRITIQUE_MARKER, text="The margins look deeper than described.")]
        )
        config = ArmConfig(
            generator_backend=generator,
            critic_backend=critic,
            max_iterations=n,
            decoupled_rationale=False,
        )
        transcript = run_reflection(case, config)
        assert len(transcript.rounds) == n
        assert transcript.terminated_by is TerminationReason.ITERATION_CAP

    def test_parse_failure_after_reask(self, case):
        generator = ScriptedBackend(
            [ScriptEntry(match="", text="the wound is somewhat concerning")]
        )
        critic = ScriptedBackend([ScriptEntry(match="", text="OK")])
        config = ArmConfig(
            generator_backend=generator,
            critic_backend=critic,
            decoupled_rationale=False,
        )
        transcript = run_reflection(case, config)
        assert transcript.terminated_by is TerminationReason.PARSE_FAILURE
        assert transcript.final is None
        assert transcript.initial is None
        assert len(generator.calls) == 2  # initial + one re-ask
        assert critic.calls == []

    def test_decoupled_rationale_replaces_text_not_stage(self, case):
        generator = ScriptedBackend(
            [ScriptEntry(match=GENERATOR_MARKER, text="Stage: III\nRationale: generator words.")]
        )
        critic = ScriptedBackend([ScriptEntry(match=CRITIQUE_MARKER, text="OK")])
        rationale = ScriptedBackend(
            [
                ScriptEntry(
                    match="The stage of this wound is III.",
                    text="full-thickness loss into subcutaneous fat",
                )
            ]
        )
        config = ArmConfig(
            generator_backend=generator,
            critic_backend=critic,
            decoupled_rationale=True,
            rationale_backend=rationale,
        )
        transcript = run_reflection(case, config)
        assert transcript.final.stage is StageLabel.III
        assert transcript.final.rationale == "full-thickness loss into subcutaneous fat"
        assert transcript.terminated_by is TerminationReason.CRITIC_OK

    def test_latency_accounting(self, case):
        generator = ScriptedBackend(
            [ScriptEntry(match=GENERATOR_MARKER, text="Stage: I\nRationale: x.", latency=0.5)]
        )
        critic = ScriptedBackend([ScriptEntry(match=CRITIQUE_MARKER, text="OK", latency=0.25)])
        config = ArmConfig(
            generator_backend=generator,
            critic_backend=critic,
            decoupled_rationale=False,
        )
        transcript = run_reflection(case, config)
        assert transcript.per_call_latencies == (0.5, 0.25)
        assert abs(transcript.total_latency - sum(transcript.per_call_latencies)) < 1e-3
        assert transcript.rounds[0].iteration_latency == 0.25

    def test_backend_failure_carries_partial_transcript(self, case):
        generator = ScriptedBackend(
            [ScriptEntry(match=GENERATOR_MARKER, text="Stage: I\nRationale: x.")]
        )
        critic = ScriptedBackend([ScriptEntry(match="never-matches-anything", text="OK")])
        config = ArmConfig(
            generator_backend=generator,
            critic_backend=critic,
            decoupled_rationale=False,
        )
        with pytest.raises(ReflectionBackendError) as err:
            run_reflection(case, config)
        assert err.value.call_index == 1
        assert err.value.partial_transcript.initial.stage is StageLabel.I
        assert isinstance(err.value.cause, NoScriptMatchError)

    def test_deterministic_transcript_bytes(self, case):
        def build():
            generator = ScriptedBackend(
                [
                    ScriptEntry(match=GENERATOR_MARKER, text="Stage: IV\nRationale: deep.", once=True),
                    ScriptEntry(match=FEEDBACK_MARKER, text="Stage: III\nRationale: revised."),
                ]
            )
            critic = ScriptedBackend(
                [
                    ScriptEntry(match="Prior stage: Stage IV", text="Consider Stage III instead."),
                    ScriptEntry(match="Prior stage: Stage III", text="OK"),
                ]
            )
            config = ArmConfig(
                generator_backend=generator,
                critic_backend=critic,
                decoupled_rationale=False,
            )
            return run_reflection(case, config).to_jsonl_line()

        assert build() == build()

    @settings(
        max_examples=40,
        deadline=None,
        suppress_health_check=[HealthCheck.function_scoped_fixture],
    )
    @given(
        n=st.integers(min_value=1, max_value=5),
        ok_pattern=st.lists(st.booleans(), min_size=0, max_size=6),
    )
    def test_rounds_never_exceed_cap(self, n, ok_pattern, stage_images):
        case = CaseRecord(
            case_id="prop",
            image_path=stage_images[StageLabel.I],
            true_stage=StageLabel.I,
        )
        generator = FnBackend(lambda i, req: "Stage: II\nRationale: r.")
        critic_calls = {"i": 0}

        def critic_fn(i, req):
            index = critic_calls["i"]
            critic_calls["i"] += 1
            ok = ok_pattern[index] if index < len(ok_pattern) else False
            return "OK" if ok else "Margins look deeper; reconsider the stage."

        critic = FnBackend(critic_fn)
        config = ArmConfig(
            generator_backend=generator,
            critic_backend=critic,
            max_iterations=n,
            decoupled_rationale=False,
        )
        transcript = run_reflection(case, config)
        assert len(transcript.rounds) <= n
        if all(not ok for ok in ok_pattern[:n]):
            assert len(transcript.rounds) == n

    def test_universal_approval_is_identity(self, case):
        generator = FnBackend(lambda i, req: "Stage: IV\nRationale: necrosis.")
        critic = FnBackend(lambda i, req: "OK")
        config = ArmConfig(
            generator_backend=generator,
            critic_backend=critic,
            max_iterations=4,
            decoupled_rationale=False,
        )
        transcript = run_reflection(case, config)
        assert transcript.final.stage is transcript.initial.stage


class TestDecoupledInference:
    def test_basic_two_call_flow(self, case):
        classifier = ScriptedBackend(
            [ScriptEntry(match="What is the stage of this pressure ulcer?", text="Stage III")]
        )
        rationale = ScriptedBackend(
            [
                ScriptEntry(
                    match="The stage of this wound is III.",
                    text="full-thickness loss into subcutaneous fat",
                )
            ]
        )
        prediction = run_decoupled_inference(case, classifier, rationale)
        assert prediction.stage is StageLabel.III
        assert prediction.rationale == "full-thickness loss into subcutaneous fat"

    def test_rationale_cannot_change_stage(self, case):
        classifier = ScriptedBackend([ScriptEntry(match="", text="Stage III")])
        rationale = ScriptedBackend(
            [ScriptEntry(match="", text="Actually this looks like Stage IV to me.")]
        )
        prediction = run_decoupled_inference(case, classifier, rationale)
        assert prediction.stage is StageLabel.III

    def test_unparseable_classifier_skips_rationale(self, case):
        classifier = ScriptedBackend([ScriptEntry(match="", text="inconclusive")])
        rationale = ScriptedBackend([ScriptEntry(match="", text="never used")])
        prediction = run_decoupled_inference(case, classifier, rationale)
        assert prediction is None
        assert len(classifier.calls) == 2  # zero-shot + re-ask
        assert rationale.calls == []

    def test_randomized_immutability_sweep(self, stage_images):
        import random

        rng = random.Random(7)
        stages = list(StageLabel)
        for index in range(100):
            classified = rng.choice(stages)
            claimed = rng.choice(stages)
            case = CaseRecord(
                case_id=f"sweep-{index}",
                image_path=stage_images[StageLabel.I],
                true_stage=rng.choice(stages),
            )
            classifier = ScriptedBackend(
                [ScriptEntry(match="", text=f"Stage {classified.name}")]
            )
            rationale = ScriptedBackend(
                [ScriptEntry(match="", text=f"Features suggest stage {claimed.name}.")]
            )
            prediction = run_decoupled_inference(case, classifier, rationale)
            assert prediction.stage is classified


def transcript_with(iteration_latencies, case_id="t"):
    rounds = tuple(
        RoundRecord(
            critique_text="c",
            verdict=VerdictKind.REVISE,
            revised=None,
            iteration_latency=latency,
        )
        for latency in iteration_latencies
    )
    return ReflectionTranscript(
        case_id=case_id,
        initial=None,
        rounds=rounds,
        final=None,
        terminated_by=TerminationReason.ITERATION_CAP,
        total_latency=sum(iteration_latencies),
        per_call_latencies=tuple(iteration_latencies),
    )


REFERENCE_MEANS = [2.95, 2.85, 2.89, 2.89, 2.90]
REFERENCE_STDEVS = [1.21, 0.19, 0.19, 0.20, 0.20]


def reference_transcripts():
    """Two transcripts symmetric around the reference means so the
    sample stdev lands on the reference dispersion."""
    low, high = [], []
    for mean, stdev in zip(REFERENCE_MEANS, REFERENCE_STDEVS):
        offset = stdev / 2**0.5
        low.append(mean - offset)
        high.append(mean + offset)
    return [transcript_with(low, "a"), transcript_with(high, "b")]


class TestTimingSummary:
    def test_constant_latencies(self):
        transcripts = [transcript_with([2.0, 2.0, 2.0], f"t{i}") for i in range(3)]
        rows = timing_summary(transcripts)
        assert [r.mean for r in rows] == [2.0, 2.0, 2.0]
        assert [r.cumulative for r in rows] == [2.0, 4.0, 6.0]
        assert all(r.stdev == 0.0 for r in rows)

    def test_cumulative_is_exact_prefix_sum(self):
        rows = timing_summary(reference_transcripts())
        running = 0.0
        for row in rows:
            running += row.mean
            assert row.cumulative == running

    def test_reference_fixture_statistics(self):
        rows = timing_summary(reference_transcripts())
        for row, mean, stdev in zip(rows, REFERENCE_MEANS, REFERENCE_STDEVS):
            # oracle: statistics module on the same samples
            samples = [t.rounds[row.iteration - 1].iteration_latency for t in reference_transcripts()]
            assert abs(row.mean - statistics.mean(samples)) < 1e-12
            assert abs(row.stdev - statistics.stdev(samples)) < 1e-12
            assert f"{row.mean:.2f}" == f"{mean:.2f}"
            assert f"{row.stdev:.2f}" == f"{stdev:.2f}"

    def test_reference_table_renders_exactly(self):
        expected = (
            "Iteration  Time (s) per Iteration  Cumulative Time (s)\n"
            "1          2.95 ± 1.21             2.95\n"
            "2          2.85 ± 0.19             5.80\n"
            "3          2.89 ± 0.19             8.69\n"
            "4          2.89 ± 0.20             11.58\n"
            "5          2.90 ± 0.20             14.48\n"
        )
        assert format_timing_table(timing_summary(reference_transcripts())) == expected

    def test_single_transcript_flagged(self):
        rows = timing_summary([transcript_with([1.5])])
        assert rows[0].stdev == 0.0
        assert rows[0].stdev_degenerate

    def test_empty_input(self):
        assert timing_summary([]) == ()


class TestTranscriptSerialization:
    def test_round_trip(self, case, stage_images):
        generator = ScriptedBackend(
            [ScriptEntry(match=GENERATOR_MARKER, text="Stage: II\nRationale: shallow.")]
        )
        critic = ScriptedBackend([ScriptEntry(match=CRITIQUE_MARKER, text="OK")])
        config = ArmConfig(
            generator_backend=generator,
            critic_backend=critic,
            decoupled_rationale=False,
        )
        transcript = run_reflection(case, config)
        line = transcript.to_jsonl_line()
        restored = ReflectionTranscript.from_json_dict(json.loads(line))
        assert restored == transcript

    def test_schema_version_present(self, case):
        generator = ScriptedBackend([ScriptEntry(match="", text="Stage: I\nRationale: r.")])
        critic = ScriptedBackend([ScriptEntry(match="", text="OK")])
        config = ArmConfig(
            generator_backend=generator, critic_backend=critic, decoupled_rationale=False
        )
        data = json.loads(run_reflection(case, config).to_jsonl_line())
        assert data["schema_version"] == 1


class TestArmConfig:
    def test_min_iterations(self, case):
        generator = ScriptedBackend([ScriptEntry(match="", text="Stage: I\nRationale: r.")])
        with pytest.raises(ValueError):
            ArmConfig(
                generator_backend=generator,
                critic_backend=generator,
                max_iterations=0,
                decoupled_rationale=False,
            )

    def test_decoupled_requires_backend(self):
        generator = ScriptedBackend([ScriptEntry(match="", text="x")])
        with pytest.raises(ValueError):
            ArmConfig(
                generator_backend=generator,
                critic_backend=generator,
                decoupled_rationale=True,
                rationale_backend=None,
            )
