"""
Stage orchestration: counterfactuals, cause extraction, explanation and the Tree-of-Thought merge
"""

from __future__ import annotations

import json
import os
import re
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional

from cfx_python.recourse.cfgen import (
    compute_scales,
    default_search_config,
    generate_counterfactuals,
    write_counterfactuals,
)
from cfx_python.recourse.model import Classifier
from cfx_python.recourse.ruledsl import (
    count_support,
    dedupe_rules,
    format_rules,
    parse_rules,
    rank_rules,
    render_support,
    renumber_rules,
    validate_rules,
)
from cfx_python.recourse.tabular import Dataset, dataset_info
from cfx_python.recourse.util import PreconditionError, RuleSyntaxError, RuleValidationError
from cfx_python.types import (
    BranchResult,
    CaseResult,
    CauseRule,
    CounterfactualSet,
    DatasetSchema,
    FeatureScales,
    Instance,
    PromptContext,
)

from .constants import (
    DEFAULT_MAX_TOKENS,
    DEFAULT_TEMPERATURE,
    DEFAULT_TOT_TEMPERATURE,
    STAGES,
    STRATEGIES,
    TOT_BRANCHES,
)
from .prompts import build_request, render_prompt
from .util import LlmError, NoRulesError, StageError, logger

RULE_LINE_PATTERN = re.compile(r"^\s*(?:[-*]\s*|\d+[.)]\s*)?((?:RULE|OBSERVATION)\b.*)$")
CASE_FILE = "case.json"


@contextmanager
def stage_errors(label: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as err:
        raise StageError(label, err) from err


def ask(backend, stage: str, prompt: str, temperature: float, max_tokens: int) -> str:
    return backend.complete(build_request(stage, prompt, temperature, max_tokens))["text"]


def rules_from_answer(text: str, schema: DatasetSchema, cfs: CounterfactualSet) -> List[CauseRule]:
    """Keep the RULE/OBSERVATION lines of an answer, then parse, validate, count and rank them."""
    lines = []
    for line in text.splitlines():
        match = RULE_LINE_PATTERN.match(line)
        if match:
            lines.append(match.group(1).strip())
    rules = validate_rules(parse_rules("\n".join(lines)), schema)
    return rank_rules(count_support(rules, cfs))


def extract_causes(
    backend,
    original: Instance,
    cfs: CounterfactualSet,
    schema: DatasetSchema,
    strategy: str = STRATEGIES.ZERO_SHOT,
    temperature: float = DEFAULT_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    transcripts: Optional[Dict[str, str]] = None,
    label: str = STAGES.EXTRACT_CAUSES,
) -> List[CauseRule]:
    """
    Ask for the causes behind the counterfactuals and return them ranked by support

    An unusable answer is reprompted once with the error appended.

    Raises:
        NoRulesError: the reprompted answer is still unusable
    """
    if not cfs["counterfactuals"]:
        raise PreconditionError("cannot extract causes without counterfactuals")
    transcripts = transcripts if transcripts is not None else {}
    ctx: PromptContext = {
        "schema": schema,
        "original": original,
        "cfs": cfs,
        "dataset_info": dataset_info(schema),
        "strategy": strategy,
    }
    prompt = render_prompt(STAGES.EXTRACT_CAUSES, ctx)
    answer = ask(backend, STAGES.EXTRACT_CAUSES, prompt, temperature, max_tokens)
    transcripts[label] = answer
    try:
        return rules_from_answer(answer, schema, cfs)
    except (RuleSyntaxError, RuleValidationError) as err:
        logger.warning(f"{label}: unusable rules ({err}), reprompting once")
        retry_prompt = "\n".join(
            [
                prompt,
                "",
                "Your previous answer was:",
                answer,
                f"It could not be used: {err}",
                "Answer again, one rule per line, following the rule format exactly.",
            ]
        )
        answer = ask(backend, STAGES.EXTRACT_CAUSES, retry_prompt, temperature, max_tokens)
        transcripts[f"{label}.retry"] = answer
        try:
            return rules_from_answer(answer, schema, cfs)
        except (RuleSyntaxError, RuleValidationError) as err:
            raise NoRulesError(f"no usable rules after one reprompt: {err}")


def generate_explanation(
    backend,
    ctx: PromptContext,
    temperature: float = DEFAULT_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    transcripts: Optional[Dict[str, str]] = None,
    label: str = STAGES.EXPLANATION,
) -> str:
    """Plain-language explanation of the ranked rules; an empty answer is retried once."""
    transcripts = transcripts if transcripts is not None else {}
    prompt = render_prompt(STAGES.EXPLANATION, ctx)
    answer = ask(backend, STAGES.EXPLANATION, prompt, temperature, max_tokens)
    transcripts[label] = answer
    if not answer.strip():
        logger.warning(f"{label}: empty explanation, retrying once")
        prompt += "\n\nPlease answer with a non-empty explanation."
        answer = ask(backend, STAGES.EXPLANATION, prompt, temperature, max_tokens)
        transcripts[f"{label}.retry"] = answer
        if not answer.strip():
            raise LlmError("empty explanation after one retry")
    return answer.strip()


def explanation_context(
    schema: DatasetSchema,
    original: Instance,
    cfs: CounterfactualSet,
    rules: List[CauseRule],
    strategy: str,
) -> PromptContext:
    return {
        "schema": schema,
        "original": original,
        "cfs": cfs,
        "rules": rules,
        "support_text": render_support(rules),
        "dataset_info": dataset_info(schema),
        "strategy": strategy,
    }


def run_branch(
    backend,
    model: Classifier,
    original: Instance,
    scales: FeatureScales,
    strategy: str,
    k: int,
    seed: int,
    search: Optional[Dict] = None,
    temperature: float = DEFAULT_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    transcripts: Optional[Dict[str, str]] = None,
    prefix: str = "",
) -> BranchResult:
    """Counterfactuals, then causes, then explanation for one strategy and seed."""
    schema = model.schema
    with stage_errors(f"{prefix}counterfactuals"):
        config = default_search_config(k=k, seed=seed, **(search or {}))
        cfs = generate_counterfactuals(model, original, config, scales)
        if not cfs["counterfactuals"]:
            raise PreconditionError("no valid counterfactual found within the search budget")

    with stage_errors(f"{prefix}{STAGES.EXTRACT_CAUSES}"):
        rules = extract_causes(
            backend,
            original,
            cfs,
            schema,
            strategy,
            temperature,
            max_tokens,
            transcripts,
            label=f"{prefix}{STAGES.EXTRACT_CAUSES}",
        )

    ctx = explanation_context(schema, original, cfs, rules, strategy)
    with stage_errors(f"{prefix}{STAGES.EXPLANATION}"):
        explanation = generate_explanation(
            backend, ctx, temperature, max_tokens, transcripts, label=f"{prefix}{STAGES.EXPLANATION}"
        )
    return {
        "strategy": strategy,
        "seed": seed,
        "cfs": cfs,
        "rules": rules,
        "support_text": ctx["support_text"],
        "explanation": explanation,
    }


def tot_explain(
    backend,
    model: Classifier,
    original: Instance,
    scales: FeatureScales,
    k: int = 5,
    seed: int = 0,
    search: Optional[Dict] = None,
    branches: List[str] = TOT_BRANCHES,
    temperature: float = DEFAULT_TEMPERATURE,
    tot_temperature: float = DEFAULT_TOT_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    dedupe: bool = False,
    case_id: int = -1,
) -> CaseResult:
    """
    Run one full branch per strategy (seed + branch index) and merge them into one explanation

    The case rules are the concatenated branch rules, renumbered and re-ranked.
    """
    transcripts: Dict[str, str] = {}
    results = []
    for index, strategy in enumerate(branches):
        logger.info(f"case {case_id}: tot branch {index + 1} ({strategy}, seed {seed + index})")
        results.append(
            run_branch(
                backend,
                model,
                original,
                scales,
                strategy,
                k,
                seed + index,
                search,
                tot_temperature,
                max_tokens,
                transcripts,
                prefix=f"branch_{index + 1}/",
            )
        )

    with stage_errors(STAGES.TOT_MERGE):
        ctx: PromptContext = {"schema": model.schema, "branches": results}
        answer = ask(
            backend, STAGES.TOT_MERGE, render_prompt(STAGES.TOT_MERGE, ctx), temperature, max_tokens
        )
        transcripts[STAGES.TOT_MERGE] = answer
        if not answer.strip():
            raise LlmError("empty merged explanation")

    rules = [rule for branch in results for rule in branch["rules"]]
    if dedupe:
        rules = dedupe_rules(rules)
    rules = rank_rules(renumber_rules(rules))
    return {
        "case_id": case_id,
        "original": original,
        "cfs": results[0]["cfs"],
        "rules": rules,
        "explanation": answer.strip(),
        "transcripts": transcripts,
        "strategy": STRATEGIES.TOT,
        "k": k,
        "seed": seed,
        "branches": results,
    }


def explain_case(
    backend,
    model: Classifier,
    dataset: Dataset,
    case_id: int,
    k: int = 5,
    strategy: str = STRATEGIES.ZERO_SHOT,
    seed: int = 0,
    scales: Optional[FeatureScales] = None,
    search: Optional[Dict] = None,
    temperature: float = DEFAULT_TEMPERATURE,
    tot_temperature: float = DEFAULT_TOT_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    dedupe_rules: bool = False,
) -> CaseResult:
    """
    Explain one dataset row end to end

    Raises:
        ValueError: no such row
        PreconditionError: the row is already classified in the desired class
        StageError: a stage failed (the stage label names which)
    """
    if strategy not in STRATEGIES.values():
        raise ValueError(f"unknown strategy ({strategy})")
    if not 0 <= case_id < len(dataset):
        raise ValueError(f"case {case_id} does not exist (dataset has {len(dataset)} rows)")
    original = dataset.rows[case_id]
    desired = model.schema["label"]["desired"]
    if model.predict(original) == desired:
        raise PreconditionError(f"case {case_id} is already classified as {desired}")
    if scales is None:
        scales = compute_scales(dataset)

    if strategy == STRATEGIES.TOT:
        return tot_explain(
            backend,
            model,
            original,
            scales,
            k,
            seed,
            search,
            temperature=temperature,
            tot_temperature=tot_temperature,
            max_tokens=max_tokens,
            dedupe=dedupe_rules,
            case_id=case_id,
        )

    transcripts: Dict[str, str] = {}
    branch = run_branch(
        backend,
        model,
        original,
        scales,
        strategy,
        k,
        seed,
        search,
        temperature,
        max_tokens,
        transcripts,
    )
    logger.info(f"case {case_id}: {len(branch['rules'])} rules, explanation of {len(branch['explanation'])} chars")
    return {
        "case_id": case_id,
        "original": original,
        "cfs": branch["cfs"],
        "rules": branch["rules"],
        "explanation": branch["explanation"],
        "transcripts": transcripts,
        "strategy": strategy,
        "k": k,
        "seed": seed,
        "branches": [],
    }


def write_branch(
    directory: str,
    schema: DatasetSchema,
    cfs: CounterfactualSet,
    rules: List[CauseRule],
    explanation: str,
) -> None:
    os.makedirs(directory, exist_ok=True)
    write_counterfactuals(
        cfs,
        schema,
        os.path.join(directory, "counterfactuals.csv"),
        os.path.join(directory, "counterfactuals.json"),
    )
    with open(os.path.join(directory, "rules.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_rules(rules) + "\n")
    with open(os.path.join(directory, "support.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_support(rules) + "\n")
    with open(os.path.join(directory, "explanation.txt"), "w", encoding="utf-8") as fh:
        fh.write(explanation + "\n")


def write_case(case: CaseResult, schema: DatasetSchema, case_dir: str) -> None:
    """Audit files for a case: the full result as JSON plus readable per-stage artifacts."""
    write_branch(case_dir, schema, case["cfs"], case["rules"], case["explanation"])
    for index, branch in enumerate(case["branches"], start=1):
        write_branch(
            os.path.join(case_dir, f"branch_{index}"),
            schema,
            branch["cfs"],
            branch["rules"],
            branch["explanation"],
        )
    with open(os.path.join(case_dir, CASE_FILE), "w", encoding="utf-8") as fh:
        json.dump(case, fh, indent=2, sort_keys=True)


def load_case(case_dir: str) -> CaseResult:
    path = os.path.join(case_dir, CASE_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing case file ({path})")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
