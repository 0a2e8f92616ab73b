"""Prompt builders: spec'd strings, determinism, few-shot selection."""

import pytest

from pustage.backends import MultiImageUnsupportedError
from pustage.domain import STAGE_ORDER, CaseRecord, PredictionSource, StageLabel, StagePrediction
from pustage.prompts import (
    EmptyCritiqueError,
    FewShotBank,
    InsufficientBankError,
    MissingDefinitionError,
    PromptTemplate,
    UnboundSlotError,
    build_cot,
    build_critique_prompt,
    build_feedback_prompt,
    build_few_shot,
    build_generator_prompt,
    build_rationale_prompt,
    build_zero_shot,
    default_stage_definitions,
)

QUESTION = "What is the stage of this pressure ulcer?"
PREAMBLE = (
    "You are a wound expert. Based on analyses of the image and context, "
    "determine the stage of this pressure ulcer."
)


@pytest.fixture
def cases(stage_images, tmp_path):
    from conftest import tiny_png

    def make(case_id, stage, note=None, unique=False):
        if unique:
            path = tmp_path / f"{case_id}.png"
            if not path.exists():
                digest = sum(case_id.encode()) % 200
                path.write_bytes(tiny_png(digest, 30, 30))
        else:
            path = stage_images[stage]
        return CaseRecord(
            case_id=case_id,
            image_path=path,
            true_stage=stage,
            clinical_note=note,
        )

    return make


@pytest.fixture
def prior():
    return StagePrediction(
        stage=StageLabel.IV,
        rationale="slough and depth",
        raw_model_text="Stage IV — slough and depth",
        source=PredictionSource.GENERATOR_INITIAL,
    )


class TestZeroShot:
    def test_shape(self, cases):
        request = build_zero_shot(cases("c1", StageLabel.II))
        assert len(request.images) == 1
        assert request.support_examples == ()

    def test_exact_question(self, cases):
        request = build_zero_shot(cases("c1", StageLabel.I))
        assert QUESTION in request.user_text

    def test_wound_expert_preamble(self, cases):
        request = build_zero_shot(cases("c1", StageLabel.I))
        assert request.system_text == PREAMBLE

    def test_identical_text_across_cases(self, cases):
        a = build_zero_shot(cases("c1", StageLabel.I))
        b = build_zero_shot(cases("c2", StageLabel.IV))
        assert a.user_text == b.user_text
        assert a.system_text == b.system_text
        assert a.images != b.images

    def test_clinical_note_appended(self, cases):
        request = build_zero_shot(cases("c1", StageLabel.I, note="sacral site"))
        assert "sacral site" in request.user_text


class TestFewShot:
    def make_bank(self, cases, per_class=3):
        pool = []
        for stage in STAGE_ORDER:
            for i in range(per_class):
                pool.append(cases(f"{stage.name}-{i}", stage, unique=True))
        return FewShotBank.from_cases(pool, examples_per_class=2)

    def test_eight_support_examples(self, cases):
        bank = self.make_bank(cases)
        request = build_few_shot(cases("query", StageLabel.II), bank, seed=1)
        assert len(request.support_examples) == 8
        assert len(request.images) == 1

    def test_k1_gives_four(self, cases):
        pool = [cases(f"{s.name}-0", s) for s in STAGE_ORDER]
        bank = FewShotBank.from_cases(pool, examples_per_class=1)
        request = build_few_shot(cases("query", StageLabel.I), bank, seed=0)
        assert len(request.support_examples) == 4

    def test_ordered_stage_i_to_iv(self, cases):
        bank = self.make_bank(cases)
        request = build_few_shot(cases("query", StageLabel.III), bank, seed=5)
        labels = [label for _, label in request.support_examples]
        assert labels == [
            "Stage I", "Stage I", "Stage II", "Stage II",
            "Stage III", "Stage III", "Stage IV", "Stage IV",
        ]

    def test_insufficient_bank(self, cases):
        pool = [cases(f"{s.name}-{i}", s) for s in STAGE_ORDER for i in range(2)]
        pool = [c for c in pool if not (c.true_stage is StageLabel.III and c.case_id.endswith("1"))]
        with pytest.raises(InsufficientBankError) as err:
            FewShotBank.from_cases(pool, examples_per_class=2)
        assert err.value.stage is StageLabel.III

    def test_query_case_excluded(self, cases):
        # exactly 2 eligible per class once the query is excluded
        pool = [cases(f"{s.name}-{i}", s) for s in STAGE_ORDER for i in range(2)]
        bank = FewShotBank.from_cases(pool, examples_per_class=2)
        with pytest.raises(InsufficientBankError):
            build_few_shot(pool[0], bank, seed=0)

    def test_seeded_selection_stable(self, cases):
        bank = self.make_bank(cases)
        query = cases("query", StageLabel.I)
        first = build_few_shot(query, bank, seed=42)
        second = build_few_shot(query, bank, seed=42)
        assert first.support_examples == second.support_examples
        other = build_few_shot(query, bank, seed=43)
        assert first.support_examples != other.support_examples

    def test_multi_image_gate(self, cases):
        bank = self.make_bank(cases)
        with pytest.raises(MultiImageUnsupportedError):
            build_few_shot(cases("query", StageLabel.I), bank, seed=0, multi_image=False)


class TestCot:
    def test_definitions_in_stage_order(self, cases):
        request = build_cot(cases("c1", StageLabel.I))
        definitions = default_stage_definitions()
        text = request.user_text
        positions = [text.index(definitions[s]) for s in STAGE_ORDER]
        assert positions == sorted(positions)

    def test_features_before_diagnosis(self, cases):
        text = build_cot(cases("c1", StageLabel.I)).user_text
        assert text.index("Describe the visible wound features") < text.index(
            "diagnosis with a rationale"
        )

    def test_missing_definition(self, cases):
        definitions = dict(default_stage_definitions())
        del definitions[StageLabel.IV]
        with pytest.raises(MissingDefinitionError) as err:
            build_cot(cases("c1", StageLabel.I), stage_definitions=definitions)
        assert err.value.stage is StageLabel.IV


class TestGeneratorPrompt:
    def test_layout_markers(self, cases):
        request = build_generator_prompt(cases("c1", StageLabel.I))
        assert "Stage:" in request.user_text
        assert "Rationale:" in request.user_text

    def test_byte_identical_repeat(self, cases):
        case = cases("c1", StageLabel.II)
        assert build_generator_prompt(case) == build_generator_prompt(case)

    def test_preamble(self, cases):
        assert build_generator_prompt(cases("c1", StageLabel.I)).system_text == PREAMBLE


class TestCritiquePrompt:
    def test_prior_included_verbatim(self, cases, prior):
        request = build_critique_prompt(cases("c1", StageLabel.IV), prior)
        assert "Stage IV" in request.user_text
        assert "slough and depth" in request.user_text

    def test_ok_instruction(self, cases, prior):
        request = build_critique_prompt(cases("c1", StageLabel.IV), prior)
        assert "OK" in request.user_text

    def test_image_attached(self, cases, prior):
        request = build_critique_prompt(cases("c1", StageLabel.IV), prior)
        assert len(request.images) == 1


class TestFeedbackPrompt:
    def test_critique_embedded(self, cases, prior):
        critique = "no bone or tendon visible; consider Stage III"
        request = build_feedback_prompt(cases("c1", StageLabel.IV), prior, critique)
        assert critique in request.user_text
        assert prior.rationale in request.user_text

    def test_empty_critique_rejected(self, cases, prior):
        with pytest.raises(EmptyCritiqueError):
            build_feedback_prompt(cases("c1", StageLabel.IV), prior, "   ")


class TestRationalePrompt:
    def test_exact_sentence(self, cases):
        request = build_rationale_prompt(cases("c1", StageLabel.III), StageLabel.III)
        assert (
            "The stage of this wound is III. For the given image, provide a rationale!"
            in request.user_text
        )

    def test_stage_substitution(self, cases):
        request = build_rationale_prompt(cases("c1", StageLabel.I), StageLabel.I)
        assert "The stage of this wound is I." in request.user_text

    def test_free_form_no_constraint(self, cases):
        request = build_rationale_prompt(cases("c1", StageLabel.II), StageLabel.II)
        assert request.decode_constraint is None


class TestTemplates:
    def test_unbound_slot_raises(self):
        template = PromptTemplate(
            template_id="t", role_preamble="", body_with_slots="a {x} b {y}", slots=("x", "y")
        )
        with pytest.raises(UnboundSlotError):
            template.render(x="1")

    def test_injected_braces_not_rescanned(self):
        template = PromptTemplate(
            template_id="t", role_preamble="", body_with_slots="{x} and {y}", slots=("x", "y")
        )
        rendered = template.render(x="{y}", y="value")
        assert rendered == "{y} and value"

    def test_no_unbound_markers_in_builders(self, stage_images):
        import re

        case = CaseRecord(
            case_id="c1",
            image_path=stage_images[StageLabel.I],
            true_stage=StageLabel.I,
        )
        prior = StagePrediction(
            stage=StageLabel.II,
            rationale="shallow",
            raw_model_text="",
            source=PredictionSource.GENERATOR_INITIAL,
        )
        texts = [
            build_zero_shot(case).user_text,
            build_cot(case).user_text,
            build_generator_prompt(case).user_text,
            build_critique_prompt(case, prior).user_text,
            build_feedback_prompt(case, prior, "critique body").user_text,
            build_rationale_prompt(case, StageLabel.III).user_text,
        ]
        for text in texts:
            assert not re.search(r"\{[a-z_]+\}", text)
