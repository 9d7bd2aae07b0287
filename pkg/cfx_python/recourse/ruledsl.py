"""
Cause rules: parsing the rule block, validating it against the schema, support counting and ranking

Grammar, one rule per line:

    RULE <feature> <op> <operand> [AND <feature> <op> <operand>]* :: <prose>
    OBSERVATION :: <prose>
"""

from __future__ import annotations

import json
from pyparsing import (
    CaselessKeyword,
    DelimitedList,
    Group,
    Keyword,
    ParseBaseException,
    ParseFatalException,
    ParseResults,
    QuotedString,
    Regex,
    StringEnd,
    Suppress,
    Word,
    ZeroOrMore,
    alphanums,
    alphas,
)
from typing import Dict, List, Optional, Sequence

from cfx_python.types import AtomicPredicate, CauseRule, CounterfactualSet, DatasetSchema, Instance

from .constants import (
    CATEGORICAL_OPERATORS,
    FEATURE_KINDS,
    OBSERVATION_KEYWORD,
    ORDERED_OPERATORS,
    PROSE_SEPARATOR,
    RULE_KEYWORD,
    RULE_OPERATORS,
)
from .util import RuleSyntaxError, RuleValidationError, logger


def check_operator(string, location, tokens):
    op = tokens[0].lower()
    if op not in RULE_OPERATORS.values():
        raise ParseFatalException(string, location, f"unknown operator {tokens[0]!r}")
    return op


def build_grammar():
    feature = Word(alphas + "_", alphanums + "_-.")
    operator = Word(alphas).set_parse_action(check_operator)
    scalar = QuotedString('"') | QuotedString("'") | Regex(r"[^\s{}:,]+")
    member = QuotedString('"') | QuotedString("'") | Regex(r"[^{},]+").set_parse_action(
        lambda tokens: tokens[0].strip()
    )
    value_set = Group(Suppress("{") + DelimitedList(member) + Suppress("}"))
    # positional (feature, op, operand); a value set stays one nested group
    predicate = Group(feature + operator + (value_set | scalar))
    conjunction = predicate + ZeroOrMore(Suppress(CaselessKeyword("AND")) + predicate)
    prose = Regex(r"\S.*")("prose")

    rule = (
        Keyword(RULE_KEYWORD)("keyword")
        + Group(conjunction)("predicates")
        + Suppress(PROSE_SEPARATOR)
        + prose
        + StringEnd()
    )
    observation = (
        Keyword(OBSERVATION_KEYWORD)("keyword") + Suppress(PROSE_SEPARATOR) + prose + StringEnd()
    )
    return rule | observation


RULE_LINE = build_grammar()


def parse_rule_line(line: str, line_number: int, rule_id: int) -> CauseRule:
    try:
        parsed = RULE_LINE.parse_string(line)
    except ParseBaseException as err:
        raise RuleSyntaxError(err.msg, line_number, err.col)

    predicate: Optional[List[AtomicPredicate]] = None
    if parsed["keyword"] == RULE_KEYWORD:
        predicate = []
        for feature, op, operand in parsed["predicates"]:
            if isinstance(operand, ParseResults):
                operand = [str(member) for member in operand.as_list()]
            predicate.append({"feature": str(feature), "op": str(op), "operand": operand})
    return {
        "id": rule_id,
        "prose": parsed["prose"].strip(),
        "predicate": predicate,
        "importance": 0,
        "rank": None,
    }


def parse_rules(text: str) -> List[CauseRule]:
    """
    Parse a rule block into rules with ids 1..n in listing order

    Blank lines are skipped; every other line must be a RULE or OBSERVATION line.

    Raises:
        RuleSyntaxError: a line does not follow the grammar, or the block has no rules
    """
    rules = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        rules.append(parse_rule_line(line.strip(), line_number, len(rules) + 1))
    if not rules:
        raise RuleSyntaxError("empty rule block", 1, 1)
    return rules


def coerce_operand(atom: AtomicPredicate, schema: DatasetSchema) -> AtomicPredicate:
    """Type the raw operand of a predicate against its feature, raising ValueError on mismatch."""
    features = {f["name"]: f for f in schema["features"]}
    name, op, operand = atom["feature"], atom["op"], atom["operand"]
    if name not in features:
        raise ValueError(f"unknown feature {name}")
    feature = features[name]

    if feature["kind"] == FEATURE_KINDS.CATEGORICAL:
        if op not in CATEGORICAL_OPERATORS:
            raise ValueError(f"type mismatch: operator {op} cannot be used on categorical feature ({name})")
        members = [str(v) for v in operand] if isinstance(operand, list) else [str(operand)]
        illegal = [v for v in members if v not in feature["values"]]
        if illegal:
            raise ValueError(f"illegal value(s) {illegal} for feature ({name})")
        if op == RULE_OPERATORS.EQ:
            if len(members) != 1:
                raise ValueError(f"eq takes a single value for feature ({name}), found {members}")
            return {"feature": name, "op": op, "operand": members[0]}
        return {"feature": name, "op": op, "operand": members}

    if op not in ORDERED_OPERATORS:
        raise ValueError(f"type mismatch: operator {op} cannot be used on continuous feature ({name})")
    if isinstance(operand, list):
        raise ValueError(f"operator {op} takes a single number for feature ({name})")
    try:
        number = float(operand)
    except ValueError:
        raise ValueError(f"operand {operand!r} of feature ({name}) is not a number")
    return {"feature": name, "op": op, "operand": int(number) if number.is_integer() else number}


def validate_rules(rules: Sequence[CauseRule], schema: DatasetSchema) -> List[CauseRule]:
    """
    Check every predicate against the schema and return rules with typed operands

    Raises:
        RuleValidationError: lists every offending rule
    """
    errors = []
    validated = []
    for rule in rules:
        if rule["predicate"] is None:
            validated.append({**rule, "importance": 0})  # type: ignore
            continue
        atoms = []
        for atom in rule["predicate"]:
            try:
                atoms.append(coerce_operand(atom, schema))
            except ValueError as err:
                errors.append(f"rule {rule['id']}: {err}")
        validated.append({**rule, "predicate": atoms})  # type: ignore
    if errors:
        raise RuleValidationError(errors)
    return validated


OPERATIONS = {
    RULE_OPERATORS.EQ: lambda value, operand: value == operand,
    RULE_OPERATORS.IN: lambda value, operand: value in operand,
    RULE_OPERATORS.LT: lambda value, operand: float(value) < float(operand),
    RULE_OPERATORS.LE: lambda value, operand: float(value) <= float(operand),
    RULE_OPERATORS.GT: lambda value, operand: float(value) > float(operand),
    RULE_OPERATORS.GE: lambda value, operand: float(value) >= float(operand),
}


def rule_satisfied(rule: CauseRule, instance: Instance) -> bool:
    """Conjunction of the rule's predicates on the row alone; observations are never satisfied."""
    if not rule["predicate"]:
        return False
    return all(
        OPERATIONS[atom["op"]](instance["values"][atom["feature"]], atom["operand"])
        for atom in rule["predicate"]
    )


def count_support(rules: Sequence[CauseRule], cfs: CounterfactualSet) -> List[CauseRule]:
    """Fill importance with the number of counterfactuals (original excluded) satisfying each rule."""
    counted = []
    for rule in rules:
        importance = sum(rule_satisfied(rule, cf) for cf in cfs["counterfactuals"])
        counted.append({**rule, "importance": int(importance)})
    return counted  # type: ignore


def rank_rules(rules: Sequence[CauseRule]) -> List[CauseRule]:
    """Order by descending importance, listing order on ties, and set rank 1..n."""
    ordered = sorted(rules, key=lambda rule: (-rule["importance"], rule["id"]))
    return [{**rule, "rank": rank} for rank, rule in enumerate(ordered, start=1)]  # type: ignore


def renumber_rules(rules: Sequence[CauseRule]) -> List[CauseRule]:
    return [{**rule, "id": i, "rank": None} for i, rule in enumerate(rules, start=1)]  # type: ignore


def format_operand(operand) -> str:
    if isinstance(operand, list):
        return "{" + ", ".join(format_operand(v) for v in operand) + "}"
    if isinstance(operand, float) and operand.is_integer():
        return str(int(operand))
    return str(operand)


def format_rule(rule: CauseRule) -> str:
    if rule["predicate"] is None:
        return f"{OBSERVATION_KEYWORD} {PROSE_SEPARATOR} {rule['prose']}"
    conditions = " AND ".join(
        f"{atom['feature']} {atom['op']} {format_operand(atom['operand'])}"
        for atom in rule["predicate"]
    )
    return f"{RULE_KEYWORD} {conditions} {PROSE_SEPARATOR} {rule['prose']}"


def format_rules(rules: Sequence[CauseRule]) -> str:
    return "\n".join(format_rule(rule) for rule in rules)


def render_support(rules: Sequence[CauseRule]) -> str:
    """The support results block, one line per rule in rank order."""
    ordered = sorted(rules, key=lambda rule: rule["rank"] if rule["rank"] is not None else rule["id"])
    return "\n".join(
        f"Number of counterfactuals following Rule {rule['id']} ({rule['prose']}): {rule['importance']}"
        for rule in ordered
    )


def predicate_key(rule: CauseRule) -> str:
    if rule["predicate"] is None:
        return "observation:" + rule["prose"].strip().lower()
    atoms = []
    for atom in rule["predicate"]:
        operand = atom["operand"]
        if isinstance(operand, list):
            operand = sorted(str(v) for v in operand)
        atoms.append([atom["feature"], atom["op"], operand])
    return json.dumps(sorted(atoms, key=json.dumps), sort_keys=True)


def dedupe_rules(rules: Sequence[CauseRule]) -> List[CauseRule]:
    """Keep the first rule of each distinct predicate (observations compare by prose)."""
    seen: Dict[str, int] = {}
    kept = []
    for rule in rules:
        key = predicate_key(rule)
        if key in seen:
            logger.debug(f"dropping rule {rule['id']}, duplicate of rule {seen[key]}")
            continue
        seen[key] = rule["id"]
        kept.append(rule)
    return kept
