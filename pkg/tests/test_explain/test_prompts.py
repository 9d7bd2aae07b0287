import pytest

from cfx_python.explain.prompts import (
    COUNTERFACTUALS,
    DATASET_INFO,
    EXAMPLE,
    EXPLANATION,
    FINAL_EXAMPLE,
    RESULTS,
    RULES,
    SYSTEM_TEXT,
    USER_DATA,
    WORKED_EXAMPLE_ANSWER,
    WORKED_EXAMPLE_START,
    build_request,
    render_prompt,
)
from cfx_python.recourse.constants import RULE_GRAMMAR
from cfx_python.recourse.ruledsl import count_support, parse_rules, rank_rules, render_support, validate_rules
from cfx_python.recourse.tabular import dataset_info

from ..test_recourse.util import adult_instance, adult_schema
from .util import worked_answers, worked_cfset


@pytest.fixture
def context():
    schema = adult_schema()
    cfs = worked_cfset()
    rules = rank_rules(
        count_support(validate_rules(parse_rules(worked_answers()["extract_causes"]), schema), cfs)
    )
    return {
        "schema": schema,
        "original": cfs["original"],
        "cfs": cfs,
        "rules": rules,
        "support_text": render_support(rules),
        "dataset_info": dataset_info(schema),
        "explanation": worked_answers()["explanation"],
        "final_example": adult_instance(
            workclass="Self-Employed", education="Bachelors", occupation="Professional"
        ),
        "strategy": "zero_shot",
    }


class TestRenderPrompt:
    def test_extract_causes(self, context):
        text = render_prompt("extract_causes", context)
        assert text.startswith(
            "I'm providing a negative outcome from a ML-system that predicts whether a person will earn"
        )
        for section in [USER_DATA, COUNTERFACTUALS, DATASET_INFO, RULES]:
            assert section in text
        assert text.index(USER_DATA) < text.index(COUNTERFACTUALS) < text.index(DATASET_INFO)
        assert text.endswith(RULE_GRAMMAR)
        assert "Prof-school" in text
        assert WORKED_EXAMPLE_START not in text

    def test_explanation(self, context):
        text = render_prompt("explanation", context)
        assert RESULTS in text
        assert "Rule 1: Higher education (Prof-school, Bachelors, Doctorate) leads to higher income." in text
        assert "We have checked that the rules are followed by 5 counterfactual:" in text
        assert context["support_text"] in text
        assert text.rstrip().endswith("the more important that rule is.")
        assert EXPLANATION in text

    def test_final_example_hides_counterfactuals(self, context):
        text = render_prompt("final_example", context)
        assert COUNTERFACTUALS not in text
        assert RULES not in text
        assert context["explanation"] in text
        assert EXAMPLE in text
        assert text.endswith("age,workclass,education,status,occupation,race,gender,hpw,income")

    def test_eval_table(self, context):
        text = render_prompt("eval_table", context)
        assert FINAL_EXAMPLE in text
        assert "'In explanation'" in text
        assert text.index(FINAL_EXAMPLE) < text.index(RULES)

    def test_tot_merge(self, context):
        branch = {
            "strategy": "zero_shot",
            "seed": 0,
            "cfs": context["cfs"],
            "rules": context["rules"],
            "support_text": context["support_text"],
            "explanation": "branch explanation",
        }
        text = render_prompt("tot_merge", {"schema": context["schema"], "branches": [branch, branch]})
        assert "System 1:" in text
        assert "System 2:" in text
        assert "System 3:" not in text
        assert text.count("branch explanation") == 2

    def test_missing_context(self, context):
        del context["cfs"]
        with pytest.raises(ValueError, match="requires context field"):
            render_prompt("extract_causes", context)

    def test_unknown_stage(self, context):
        with pytest.raises(ValueError, match="unknown stage"):
            render_prompt("summarize", context)

    def test_deterministic(self, context):
        assert render_prompt("explanation", context) == render_prompt("explanation", dict(context))


class TestOneShot:
    def test_extract_causes_exemplar(self, context):
        context["strategy"] = "one_shot"
        text = render_prompt("extract_causes", context)
        assert text.startswith(WORKED_EXAMPLE_START)
        assert WORKED_EXAMPLE_ANSWER in text
        assert "RULE status eq Divorced :: Marital status being Divorced" in text
        zero_shot = render_prompt("extract_causes", dict(context, strategy="zero_shot"))
        assert text.endswith(zero_shot)

    def test_explanation_exemplar(self, context):
        context["strategy"] = "one_shot"
        text = render_prompt("explanation", context)
        assert text.startswith(WORKED_EXAMPLE_START)
        assert text.count("Based on the analysis of your current situation") == 1
        assert "Based on the analysis" not in render_prompt("explanation", dict(context, strategy="zero_shot"))

    def test_no_exemplar_for_evaluation_stages(self, context):
        context["strategy"] = "one_shot"
        assert WORKED_EXAMPLE_START not in render_prompt("final_example", context)
        assert WORKED_EXAMPLE_START not in render_prompt("eval_table", context)


class TestBuildRequest:
    def test_fields(self):
        request = build_request("explanation", "text", 0.5, 100)
        assert request == {
            "stage": "explanation",
            "system_text": SYSTEM_TEXT,
            "user_text": "text",
            "temperature": 0.5,
            "max_tokens": 100,
        }
