"""
Closed-loop evaluation of an explanation

An example is regenerated from the original row, the explanation and the dataset info alone,
then scored for validity, consistency with the ranked causes and novelty.
"""

from __future__ import annotations

import io
import json
import numpy as np
import os
import pandas as pd
import re
from typing import Dict, List, Optional, Sequence

from cfx_python.recourse.model import Classifier
from cfx_python.recourse.ruledsl import render_support, rule_satisfied
from cfx_python.recourse.tabular import (
    Dataset,
    contains_instance,
    dataset_info,
    feature_names,
    parse_row,
    write_instances_csv,
)
from cfx_python.recourse.util import RowValidationError
from cfx_python.types import (
    CaseResult,
    CauseRule,
    ClosedLoopRecord,
    DatasetSchema,
    EvaluationRow,
    Instance,
    MetricsReport,
    PromptContext,
)

from .constants import (
    DEFAULT_MAX_TOKENS,
    DEFAULT_TEMPERATURE,
    EVAL_TABLE_SOURCES,
    EVALUATION_COLUMNS,
    EVALUATION_CSV,
    NOT_APPLICABLE,
    REPORT_COLUMNS,
    REPORT_FOOTER,
    STAGES,
    TEMP_CSV,
)
from .prompts import build_request, render_prompt
from .util import LlmError, logger

FENCED_BLOCK = re.compile(r"```[ \t]*[A-Za-z]*[ \t]*\n(.*?)```", re.DOTALL)
RULE_REFERENCE = re.compile(r"^\s*rule\s+(\d+)\s*[:.)-]?\s*", re.IGNORECASE)
RECORD_FIELDS = list(ClosedLoopRecord.__annotations__)


def answer_block(text: str) -> str:
    """Contents of the first fenced block of an answer, or the whole answer when there is none."""
    match = FENCED_BLOCK.search(text)
    return match.group(1) if match else text


def parse_final_example(text: str, schema: DatasetSchema) -> Instance:
    """
    Read the single CSV row of a final-example answer, labelled with the desired class

    Raises:
        ValueError: no header naming every feature, or no data row after it
        RowValidationError: the row is not schema-legal
    """
    lines = [line.strip() for line in answer_block(text).splitlines() if line.strip()]
    names = set(feature_names(schema))
    for index, line in enumerate(lines):
        columns = {column.strip().strip("\"'") for column in line.split(",")}
        if names <= columns:
            if index + 1 >= len(lines):
                raise ValueError("the CSV header is not followed by a data row")
            frame = pd.read_csv(
                io.StringIO(lines[index] + "\n" + lines[index + 1]),
                dtype=str,
                keep_default_na=False,
                skipinitialspace=True,
            )
            frame.columns = [str(c).strip() for c in frame.columns]
            instance = parse_row(frame.to_dict("records")[0], schema, with_label=False)
            instance["label"] = schema["label"]["desired"]
            return instance
    raise ValueError(f"no CSV header with the columns {','.join(feature_names(schema))} was found")


def generate_final_example(
    backend,
    original: Instance,
    explanation: str,
    schema: DatasetSchema,
    case_dir: Optional[str] = None,
    temperature: float = DEFAULT_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    transcripts: Optional[Dict[str, str]] = None,
) -> Instance:
    """
    Ask for an example in the desired class using only the original row, the explanation and dataset info

    An unusable row is reprompted once with the validation message. The accepted row is
    written to temp_csv.csv in case_dir.

    Raises:
        LlmError: the reprompted answer is still unusable
    """
    if not explanation.strip():
        raise ValueError("cannot generate a final example from an empty explanation")
    transcripts = transcripts if transcripts is not None else {}
    ctx: PromptContext = {
        "schema": schema,
        "original": original,
        "explanation": explanation,
        "dataset_info": dataset_info(schema),
    }
    prompt = render_prompt(STAGES.FINAL_EXAMPLE, ctx)
    answer = backend.complete(build_request(STAGES.FINAL_EXAMPLE, prompt, temperature, max_tokens))["text"]
    transcripts[STAGES.FINAL_EXAMPLE] = answer
    try:
        example = parse_final_example(answer, schema)
    except (ValueError, RowValidationError) as err:
        logger.warning(f"{STAGES.FINAL_EXAMPLE}: unusable row ({err}), reprompting once")
        retry_prompt = "\n".join(
            [
                prompt,
                "",
                "Your previous answer was:",
                answer,
                f"It could not be used: {err}",
                "Answer again with the CSV header line and exactly one data row using only legal values.",
            ]
        )
        answer = backend.complete(
            build_request(STAGES.FINAL_EXAMPLE, retry_prompt, temperature, max_tokens)
        )["text"]
        transcripts[f"{STAGES.FINAL_EXAMPLE}.retry"] = answer
        try:
            example = parse_final_example(answer, schema)
        except (ValueError, RowValidationError) as err:
            raise LlmError(f"no usable final example after one reprompt: {err}")

    if case_dir:
        os.makedirs(case_dir, exist_ok=True)
        write_instances_csv([example], schema, os.path.join(case_dir, TEMP_CSV))
    return example


def check_validity(model: Classifier, final_example: Instance) -> bool:
    return model.predict(final_example) == model.schema["label"]["desired"]


def ranked(rules: Sequence[CauseRule]) -> List[CauseRule]:
    return sorted(rules, key=lambda rule: rule["rank"] if rule["rank"] is not None else rule["id"])


def build_evaluation_table(rules: Sequence[CauseRule], final_example: Instance) -> List[EvaluationRow]:
    """One row per rule in rank order, flagging the rules the final example satisfies."""
    return [
        {
            "rule": rule["prose"],
            "importance": rule["importance"],
            "in_explanation": int(rule_satisfied(rule, final_example)),
        }
        for rule in ranked(rules)
    ]


def normalize_rule_text(text: str) -> str:
    text = RULE_REFERENCE.sub("", str(text).strip())
    return " ".join(text.casefold().split()).rstrip(".")


def match_answer_rows(names: Sequence[str], rules: Sequence[CauseRule]) -> List[CauseRule]:
    """
    Rule for each answer row: by rule text or a leading "Rule <id>", else by the listing (id) order

    Raises:
        ValueError: some rows name a rule and others cannot be matched, or a rule is named twice
    """
    listing = sorted(rules, key=lambda rule: rule["id"])
    by_text = {normalize_rule_text(rule["prose"]): rule for rule in listing}
    by_id = {rule["id"]: rule for rule in listing}
    matched: List[Optional[CauseRule]] = []
    for name in names:
        reference = RULE_REFERENCE.match(str(name).strip())
        rule = by_text.get(normalize_rule_text(name))
        if rule is None and reference:
            rule = by_id.get(int(reference.group(1)))
        matched.append(rule)

    if all(rule is None for rule in matched):
        return listing
    unmatched = [name for name, rule in zip(names, matched) if rule is None]
    if unmatched:
        raise ValueError(f"evaluation table rows match no rule: {unmatched}")
    ids = [rule["id"] for rule in matched]  # type: ignore
    if len(set(ids)) != len(ids):
        raise ValueError(f"evaluation table names a rule more than once: {ids}")
    return matched  # type: ignore


def parse_evaluation_answer(text: str, rules: Sequence[CauseRule]) -> List[EvaluationRow]:
    """
    Take the in-explanation flags from an evaluation table answer; importances stay the native counts

    Rows are paired with rules through the 'Rule' column when it names them, otherwise in the
    listing order of the prompt. The result is in rank order.

    Raises:
        ValueError: missing columns, wrong row count, unmatched rows or flags other than 0/1
    """
    frame = pd.read_csv(io.StringIO(answer_block(text).strip()), dtype=str, keep_default_na=False)
    frame.columns = [str(c).strip() for c in frame.columns]
    if "In explanation" not in frame.columns:
        raise ValueError(f"evaluation table lacks the 'In explanation' column: {list(frame.columns)}")
    if len(frame) != len(rules):
        raise ValueError(f"evaluation table has {len(frame)} rows for {len(rules)} rules")
    flags = [value.strip() for value in frame["In explanation"]]
    if any(flag not in ("0", "1") for flag in flags):
        raise ValueError(f"'In explanation' must be 0 or 1: {flags}")
    names = list(frame["Rule"]) if "Rule" in frame.columns else [""] * len(frame)
    flag_by_id = {rule["id"]: int(flag) for rule, flag in zip(match_answer_rows(names, rules), flags)}
    return [
        {"rule": rule["prose"], "importance": rule["importance"], "in_explanation": flag_by_id[rule["id"]]}
        for rule in ranked(rules)
    ]


def request_evaluation_table(
    backend,
    case: CaseResult,
    final_example: Instance,
    schema: DatasetSchema,
    temperature: float = DEFAULT_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    transcripts: Optional[Dict[str, str]] = None,
) -> List[EvaluationRow]:
    """Evaluation table with the model's own judgement of which rules the final example follows."""
    transcripts = transcripts if transcripts is not None else {}
    rules = case["rules"]
    ctx: PromptContext = {
        "schema": schema,
        "original": case["original"],
        "cfs": case["cfs"],
        "rules": rules,
        "support_text": render_support(rules),
        "dataset_info": dataset_info(schema),
        "final_example": final_example,
    }
    prompt = render_prompt(STAGES.EVAL_TABLE, ctx)
    answer = backend.complete(build_request(STAGES.EVAL_TABLE, prompt, temperature, max_tokens))["text"]
    transcripts[STAGES.EVAL_TABLE] = answer
    try:
        return parse_evaluation_answer(answer, rules)
    except (ValueError, pd.errors.ParserError) as err:
        logger.warning(f"{STAGES.EVAL_TABLE}: unusable table ({err}), reprompting once")
        retry_prompt = f"{prompt}\nYour previous answer could not be used: {err}\nAnswer again with the CSV table only."
        answer = backend.complete(
            build_request(STAGES.EVAL_TABLE, retry_prompt, temperature, max_tokens)
        )["text"]
        transcripts[f"{STAGES.EVAL_TABLE}.retry"] = answer
        try:
            return parse_evaluation_answer(answer, rules)
        except (ValueError, pd.errors.ParserError) as err:
            raise LlmError(f"no usable evaluation table after one reprompt: {err}")


def evaluation_frame(table: Sequence[EvaluationRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [[row["rule"], row["importance"], row["in_explanation"]] for row in table],
        columns=EVALUATION_COLUMNS,
    )


def write_evaluation_csv(table: Sequence[EvaluationRow], path: str) -> None:
    evaluation_frame(table).to_csv(path, index=False, lineterminator="\n")


def read_evaluation_csv(path: str) -> List[EvaluationRow]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    return [
        {"rule": row[0], "importance": int(row[1]), "in_explanation": int(row[2])}
        for row in frame[EVALUATION_COLUMNS].itertuples(index=False)
    ]


def closed_loop_record(
    case: CaseResult,
    final_example: Instance,
    validity: bool,
    table: Sequence[EvaluationRow],
    in_data: bool,
) -> ClosedLoopRecord:
    flags = [bool(row["in_explanation"]) for row in table]
    causes_used = sum(flags)
    if causes_used > len(table):
        raise ValueError("more causes used than identified")
    return {
        "case_id": case["case_id"],
        "final_example": final_example["values"],
        "validity": bool(validity),
        "causes_identified": len(table),
        "causes_used": causes_used,
        "top_used": [flags[rank] if rank < len(flags) else None for rank in range(3)],
        "in_data": bool(in_data),
        "strategy": case["strategy"],
        "k": case["k"],
    }


def evaluate_case(
    backend,
    model: Classifier,
    dataset: Dataset,
    case: CaseResult,
    case_dir: Optional[str] = None,
    eval_table: str = EVAL_TABLE_SOURCES.NATIVE,
    temperature: float = DEFAULT_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> ClosedLoopRecord:
    """
    Score an explained case: final example, validity, evaluation table and novelty

    dataset is the novelty reference (the full data or the training split).
    """
    if eval_table not in EVAL_TABLE_SOURCES.values():
        raise ValueError(f"unknown evaluation table source ({eval_table})")
    schema = model.schema
    transcripts = case.setdefault("transcripts", {})  # type: ignore
    final_example = generate_final_example(
        backend,
        case["original"],
        case["explanation"],
        schema,
        case_dir,
        temperature,
        max_tokens,
        transcripts,
    )
    validity = check_validity(model, final_example)
    if eval_table == EVAL_TABLE_SOURCES.LLM:
        table = request_evaluation_table(
            backend, case, final_example, schema, temperature, max_tokens, transcripts
        )
    else:
        table = build_evaluation_table(case["rules"], final_example)
    if case_dir:
        write_evaluation_csv(table, os.path.join(case_dir, EVALUATION_CSV))
    record = closed_loop_record(
        case, final_example, validity, table, contains_instance(dataset, final_example)
    )
    logger.info(
        f"case {case['case_id']}: validity={record['validity']} causes used {record['causes_used']}/{record['causes_identified']}"
    )
    return record


def percent(series: pd.Series) -> Optional[float]:
    values = series.dropna()
    if values.empty:
        return None
    return float(100.0 * values.mean())


def aggregate(
    records: Sequence[ClosedLoopRecord], group_by: Sequence[str] = ("strategy", "k")
) -> List[MetricsReport]:
    """
    Table-style metrics per group

    Causes used is the per-case ratio averaged over cases with at least one cause; the pooled
    ratio is reported alongside. Rank usage only counts cases that have that rank.
    """
    if not records:
        raise ValueError("cannot aggregate an empty record set")
    unknown = set(group_by) - {"strategy", "k"}
    if unknown:
        raise ValueError(f"unknown grouping keys ({', '.join(sorted(unknown))})")

    frame = pd.DataFrame(
        [
            {
                "strategy": record["strategy"],
                "k": record["k"],
                "validity": float(record["validity"]),
                "identified": record["causes_identified"],
                "used": record["causes_used"],
                "used_ratio": record["causes_used"] / record["causes_identified"]
                if record["causes_identified"]
                else np.nan,
                "first": np.nan if record["top_used"][0] is None else float(record["top_used"][0]),
                "second": np.nan if record["top_used"][1] is None else float(record["top_used"][1]),
                "third": np.nan if record["top_used"][2] is None else float(record["top_used"][2]),
                "in_data": float(record["in_data"]),
            }
            for record in records
        ]
    )

    reports = []
    keys = list(group_by)
    groups = frame.groupby(keys, sort=True) if keys else [((), frame)]
    for key, group in groups:
        key = key if isinstance(key, tuple) else (key,)
        labels = dict(zip(keys, key))
        identified = int(group["identified"].sum())
        reports.append(
            {
                "strategy": str(labels.get("strategy", "*")),
                "k": int(labels.get("k", 0)),
                "n_cases": int(len(group)),
                "validity_pct": float(100.0 * group["validity"].mean()),
                "mean_causes_identified": float(group["identified"].mean()),
                "causes_used_pct": percent(group["used_ratio"]),
                "causes_used_pooled_pct": float(100.0 * group["used"].sum() / identified)
                if identified
                else None,
                "first_cause_used_pct": percent(group["first"]),
                "second_cause_used_pct": percent(group["second"]),
                "third_cause_used_pct": percent(group["third"]),
                "in_data_pct": float(100.0 * group["in_data"].mean()),
            }
        )
    return reports  # type: ignore


def format_pct(value: Optional[float]) -> str:
    return NOT_APPLICABLE if value is None else f"{value:.0f}%"


def report_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    rows = []
    for report in reports:
        rows.append(
            {
                REPORT_COLUMNS.strategy: report["strategy"],
                REPORT_COLUMNS.k: report["k"],
                REPORT_COLUMNS.n_cases: report["n_cases"],
                REPORT_COLUMNS.validity_pct: format_pct(report["validity_pct"]),
                REPORT_COLUMNS.mean_causes_identified: f"{report['mean_causes_identified']:.2f}",
                REPORT_COLUMNS.causes_used_pct: format_pct(report["causes_used_pct"]),
                REPORT_COLUMNS.first_cause_used_pct: format_pct(report["first_cause_used_pct"]),
                REPORT_COLUMNS.second_cause_used_pct: format_pct(report["second_cause_used_pct"]),
                REPORT_COLUMNS.third_cause_used_pct: format_pct(report["third_cause_used_pct"]),
                REPORT_COLUMNS.in_data_pct: format_pct(report["in_data_pct"]),
            }
        )
    return pd.DataFrame(rows, columns=list(REPORT_COLUMNS.values()))


def format_report(reports: Sequence[MetricsReport]) -> str:
    return report_frame(reports).to_string(index=False) + "\n" + REPORT_FOOTER


def write_report(reports: Sequence[MetricsReport], csv_path: str, json_path: Optional[str] = None) -> None:
    report_frame(reports).to_csv(csv_path, index=False, lineterminator="\n")
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(list(reports), fh, indent=2, sort_keys=True)


def write_records(records: Sequence[ClosedLoopRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_records(path: str) -> List[ClosedLoopRecord]:
    """
    Raises:
        ValueError: a line is not a JSON record (names the line number) or the file has no records
    """
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"malformed record on line {line_number} of {path}: {err}")
            if not isinstance(record, dict):
                raise ValueError(f"malformed record on line {line_number} of {path}: not an object")
            missing = [field for field in RECORD_FIELDS if field not in record]
            if missing:
                raise ValueError(
                    f"malformed record on line {line_number} of {path}: missing {', '.join(missing)}"
                )
            records.append(record)
    if not records:
        raise ValueError(f"no records in {path}")
    return records
