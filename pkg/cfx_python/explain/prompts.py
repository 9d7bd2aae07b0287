"""
Prompt templates for every pipeline stage

Each stage renders a fixed template with the section delimiters below. One-shot prompts are
the zero-shot prompt with the bundled worked example prepended.
"""

from __future__ import annotations

import json
import os
from functools import lru_cache
from typing import Dict, List

from cfx_python.recourse.constants import RULE_GRAMMAR
from cfx_python.recourse.ruledsl import (
    count_support,
    parse_rules,
    rank_rules,
    render_support,
    validate_rules,
)
from cfx_python.recourse.tabular import ADULT_SCHEMA, dataset_info, feature_names, load_schema
from cfx_python.recourse.tabular import serialize_instances
from cfx_python.types import CauseRule, ChatRequest, PromptContext

from .constants import DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, STAGES, STRATEGIES

WORKED_EXAMPLE = os.path.join(os.path.dirname(__file__), "data", "worked_example.json")

SYSTEM_TEXT = "You are an assistant that explains the decisions of a machine learning system to its users."

USER_DATA = "----- User Data Negative outcome -----"
COUNTERFACTUALS = "----- Positive counterfactual outcome -----"
RULES = "----- Rules -----"
RESULTS = "----- Results -----"
DATASET_INFO = "----- Dataset info -----"
EXPLANATION = "----- Explanation -----"
EXAMPLE = "----- Example -----"
FINAL_EXAMPLE = "----- Final example -----"
WORKED_EXAMPLE_START = "----- Worked example -----"
WORKED_EXAMPLE_ANSWER = "----- Worked example answer -----"
WORKED_EXAMPLE_END = "----- End of worked example -----"

EXPLAIN_INSTRUCTION = (
    "Given this information, provide an explanation to the user in plain language so that he/she "
    "can improve their chances of changing class. It should be as clear as possible and call to "
    "action. Consider that the higher amount of counterfactual that follow the rule, the more "
    "important that rule is."
)

# context fields each stage needs besides the schema
STAGE_FIELDS: Dict[str, List[str]] = {
    STAGES.EXTRACT_CAUSES: ["original", "cfs", "dataset_info"],
    STAGES.EXPLANATION: ["original", "cfs", "dataset_info", "rules", "support_text"],
    STAGES.TOT_MERGE: ["branches"],
    STAGES.FINAL_EXAMPLE: ["original", "explanation", "dataset_info"],
    STAGES.EVAL_TABLE: ["original", "rules", "support_text", "dataset_info", "final_example"],
}


def check_context(stage: str, ctx: PromptContext) -> None:
    if stage not in STAGE_FIELDS:
        raise ValueError(f"unknown stage ({stage})")
    missing = [field for field in ["schema"] + STAGE_FIELDS[stage] if field not in ctx]
    if missing:
        raise ValueError(f"stage {stage} requires context field(s): {', '.join(missing)}")


def rule_list(rules: List[CauseRule]) -> str:
    return "\n".join(f"Rule {rule['id']}: {rule['prose']}" for rule in sorted(rules, key=lambda r: r["id"]))


def rules_section(ctx: PromptContext) -> List[str]:
    return [
        RULES,
        "By generating counterfactual, we obtained the following rules:",
        rule_list(ctx["rules"]),
        "",
        RESULTS,
        f"We have checked that the rules are followed by {len(ctx['cfs']['counterfactuals'])} counterfactual:"
        if "cfs" in ctx
        else "We have checked how many counterfactuals follow each rule:",
        ctx["support_text"],
        "",
    ]


def dataset_info_section(ctx: PromptContext) -> List[str]:
    return [DATASET_INFO, "The following info about the dataset is available:", ctx["dataset_info"], ""]


def render_extract_causes(ctx: PromptContext) -> List[str]:
    schema = ctx["schema"]
    return [
        f"I'm providing a negative outcome from a {schema['task']} and your task is to extract the "
        "most important observed rules based on a set of counterfactual cases.",
        USER_DATA,
        serialize_instances([ctx["original"]], schema),
        "",
        COUNTERFACTUALS,
        serialize_instances(ctx["cfs"]["counterfactuals"], schema),
        "",
    ] + dataset_info_section(ctx) + [RULES, RULE_GRAMMAR]


def render_explanation(ctx: PromptContext) -> List[str]:
    schema = ctx["schema"]
    return (
        [
            f"A person has been classified in the negative class of {schema['task']}. The data is the following.",
            USER_DATA,
            serialize_instances([ctx["original"]], schema),
            "",
            COUNTERFACTUALS,
            serialize_instances(ctx["cfs"]["counterfactuals"], schema),
            "",
        ]
        + rules_section(ctx)
        + dataset_info_section(ctx)
        + [EXPLANATION, EXPLAIN_INSTRUCTION]
    )


def render_tot_merge(ctx: PromptContext) -> List[str]:
    lines = [
        f"A negative outcome from a {ctx['schema']['task']} was provided to several systems that "
        "explain why that case is negative analyzing counterfactuals, generating rules and evaluating them.",
        "The results of the system are the following.",
    ]
    for number, branch in enumerate(ctx["branches"], start=1):
        lines.extend(
            [
                f"System {number}:",
                RULES,
                "By generating counterfactual, we obtained the following rules:",
                rule_list(branch["rules"]),
                "",
                RESULTS,
                f"We have checked that the rules are followed by {len(branch['cfs']['counterfactuals'])} counterfactual:",
                branch["support_text"],
                "",
                EXPLANATION,
                branch["explanation"],
                "",
            ]
        )
    lines.append(EXPLAIN_INSTRUCTION.replace("counterfactual that", "counterfactuals that"))
    return lines


def render_final_example(ctx: PromptContext) -> List[str]:
    schema = ctx["schema"]
    columns = feature_names(schema) + [schema["label"]["name"]]
    return (
        [
            f"A person has been classified in the negative class of {schema['task']}. The data is the following:",
            USER_DATA,
            serialize_instances([ctx["original"]], schema),
            "",
            EXPLANATION,
            "The following explanation was given in order to try and change the class.",
            ctx["explanation"],
            "",
        ]
        + dataset_info_section(ctx)
        + [
            EXAMPLE,
            "Given this information, provide an example that would be in the positive class. Answer "
            "with a CSV block: one header line followed by exactly one data row. It is very important "
            "to use exactly these columns, since later processes rely on them:",
            ",".join(columns),
        ]
    )


def render_eval_table(ctx: PromptContext) -> List[str]:
    schema = ctx["schema"]
    return (
        [
            f"I'm providing a negative outcome from a {schema['task']}. A counterfactual example in the "
            "format of a single row was created from the rules that are also provided. Check the number "
            "of rules followed by the example. The result must be given as a CSV table with columns "
            "'Rule' with the text of the rule, 'Importance' with the number of counterfactuals follow "
            "each rule, and 'In explanation' (1 or 0) depending if the final example follows the "
            "explanation or not. Keep one row per rule in the order given.",
            USER_DATA,
            serialize_instances([ctx["original"]], schema),
            "",
            FINAL_EXAMPLE,
            serialize_instances([ctx["final_example"]], schema),
            "",
        ]
        + rules_section(ctx)
        + dataset_info_section(ctx)
    )


RENDERERS = {
    STAGES.EXTRACT_CAUSES: render_extract_causes,
    STAGES.EXPLANATION: render_explanation,
    STAGES.TOT_MERGE: render_tot_merge,
    STAGES.FINAL_EXAMPLE: render_final_example,
    STAGES.EVAL_TABLE: render_eval_table,
}
ONE_SHOT_STAGES = {STAGES.EXTRACT_CAUSES, STAGES.EXPLANATION}


@lru_cache(maxsize=None)
def load_worked_example() -> Dict:
    with open(WORKED_EXAMPLE, "r", encoding="utf-8") as fh:
        return json.load(fh)


@lru_cache(maxsize=None)
def exemplar_block(stage: str) -> str:
    """The worked example rendered as a zero-shot prompt for the stage, followed by its answer."""
    example = load_worked_example()
    schema = load_schema(ADULT_SCHEMA)
    cfs = {
        "original": example["original"],
        "counterfactuals": example["counterfactuals"],
        "distances": [],
        "diversity": 0.0,
        "changed_features": [],
        "desired": schema["label"]["desired"],
        "complete": True,
    }
    rules = rank_rules(
        count_support(validate_rules(parse_rules(example["answers"][STAGES.EXTRACT_CAUSES]), schema), cfs)  # type: ignore
    )
    ctx: PromptContext = {
        "schema": schema,
        "original": example["original"],
        "cfs": cfs,  # type: ignore
        "rules": rules,
        "support_text": render_support(rules),
        "dataset_info": dataset_info(schema),
    }
    return "\n".join(
        [
            WORKED_EXAMPLE_START,
            "\n".join(RENDERERS[stage](ctx)),
            WORKED_EXAMPLE_ANSWER,
            example["answers"][stage],
            WORKED_EXAMPLE_END,
            "",
            "",
        ]
    )


def render_prompt(stage: str, ctx: PromptContext) -> str:
    """
    Render the user text for a stage

    Raises:
        ValueError: the context lacks a field the stage needs
    """
    check_context(stage, ctx)
    text = "\n".join(RENDERERS[stage](ctx))
    if ctx.get("strategy") == STRATEGIES.ONE_SHOT and stage in ONE_SHOT_STAGES:
        text = exemplar_block(stage) + text
    return text


def build_request(
    stage: str,
    user_text: str,
    temperature: float = DEFAULT_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> ChatRequest:
    return {
        "stage": stage,
        "system_text": SYSTEM_TEXT,
        "user_text": user_text,
        "temperature": temperature,
        "max_tokens": max_tokens,
    }
