import numpy as np
import pandas as pd
import pytest

from cfx_python.recourse.ruledsl import (
    count_support,
    dedupe_rules,
    format_rule,
    format_rules,
    parse_rules,
    rank_rules,
    render_support,
    renumber_rules,
    rule_satisfied,
    validate_rules,
)
from cfx_python.recourse.util import RuleSyntaxError, RuleValidationError

from .util import adult_instance, adult_schema, random_instances, worked_example


def worked_rules():
    example = worked_example()
    schema = adult_schema()
    return validate_rules(parse_rules(example["answers"]["extract_causes"]), schema)


def worked_cfset():
    example = worked_example()
    return {"original": example["original"], "counterfactuals": example["counterfactuals"]}


class TestParseRules:
    def test_worked_example_block(self):
        rules = parse_rules(worked_example()["answers"]["extract_causes"])
        assert [rule["id"] for rule in rules] == [1, 2, 3, 4, 5]
        assert rules[0]["predicate"] == [
            {"feature": "education", "op": "in", "operand": ["Prof-school", "Bachelors", "Doctorate"]}
        ]
        assert rules[0]["prose"] == "Higher education (Prof-school, Bachelors, Doctorate) leads to higher income."
        assert rules[1]["predicate"] == [{"feature": "status", "op": "eq", "operand": "Divorced"}]
        assert rules[4]["predicate"] is None
        assert rules[4]["prose"] == "Hours per week less influential in this case."
        assert all(rule["importance"] == 0 and rule["rank"] is None for rule in rules)

    def test_conjunction(self):
        rules = parse_rules("RULE hpw gt 40 and occupation eq Professional :: Long hours as a professional")
        assert rules[0]["predicate"] == [
            {"feature": "hpw", "op": "gt", "operand": "40"},
            {"feature": "occupation", "op": "eq", "operand": "Professional"},
        ]

    def test_scalar_operand_is_plain_string(self):
        (rule,) = parse_rules("RULE hpw gt 40 :: Work more hours")
        operand = rule["predicate"][0]["operand"]
        assert operand == "40"
        assert type(operand) is str
        (validated,) = validate_rules([rule], adult_schema())
        assert validated["predicate"][0]["operand"] == 40

    def test_value_set_operand_is_plain_list(self):
        (rule,) = parse_rules("RULE education in {Bachelors, Doctorate} :: Study")
        operand = rule["predicate"][0]["operand"]
        assert type(operand) is list
        assert all(type(member) is str for member in operand)
        assert validate_rules([rule], adult_schema())[0]["predicate"][0]["operand"] == ["Bachelors", "Doctorate"]

    def test_quoted_operands(self):
        rules = parse_rules('RULE workclass in {"Other/Unknown", Private} :: Quoted members')
        assert rules[0]["predicate"][0]["operand"] == ["Other/Unknown", "Private"]

    def test_blank_lines_skipped(self):
        rules = parse_rules("\nOBSERVATION :: first\n\n   \nOBSERVATION :: second\n")
        assert [rule["id"] for rule in rules] == [1, 2]
        assert rules[1]["prose"] == "second"

    def test_empty_block(self):
        with pytest.raises(RuleSyntaxError, match="empty rule block"):
            parse_rules("\n  \n")

    def test_unknown_operator(self):
        with pytest.raises(RuleSyntaxError) as err:
            parse_rules("OBSERVATION :: ok\nRULE hpw around 40 :: Roughly forty hours")
        assert err.value.line == 2
        assert "unknown operator 'around'" in str(err.value)

    def test_free_text_line(self):
        with pytest.raises(RuleSyntaxError) as err:
            parse_rules("Here are the rules I found:")
        assert err.value.line == 1

    def test_missing_prose(self):
        with pytest.raises(RuleSyntaxError):
            parse_rules("RULE hpw gt 40")


class TestValidateRules:
    def test_operands_typed(self):
        schema = adult_schema()
        rules = validate_rules(parse_rules("RULE hpw ge 40.0 AND age lt 35.5 :: Young and busy"), schema)
        assert rules[0]["predicate"][0]["operand"] == 40
        assert isinstance(rules[0]["predicate"][0]["operand"], int)
        assert rules[0]["predicate"][1]["operand"] == 35.5

    def test_singleton_set_with_eq(self):
        rules = validate_rules(parse_rules("RULE status eq {Divorced} :: Divorced"), adult_schema())
        assert rules[0]["predicate"][0]["operand"] == "Divorced"

    def test_collects_every_error(self):
        text = "\n".join(
            [
                "RULE height gt 180 :: Tall people",
                "RULE education gt Bachelors :: Ordered categories",
                "RULE education in {Bachelors, PhD} :: Degrees",
                "RULE hpw eq 40 :: Forty hours",
                "RULE hpw gt many :: Many hours",
            ]
        )
        with pytest.raises(RuleValidationError) as err:
            validate_rules(parse_rules(text), adult_schema())
        errors = err.value.errors
        assert len(errors) == 5
        assert errors[0] == "rule 1: unknown feature height"
        assert errors[1].startswith("rule 2: type mismatch")
        assert errors[2].startswith("rule 3: illegal value(s) ['PhD']")
        assert errors[3].startswith("rule 4: type mismatch")
        assert "not a number" in errors[4]

    def test_eq_with_several_values(self):
        with pytest.raises(RuleValidationError, match="single value"):
            validate_rules(parse_rules("RULE status eq {Divorced, Single} :: Alone"), adult_schema())


class TestSupport:
    def test_worked_example_support(self):
        rules = count_support(worked_rules(), worked_cfset())
        assert [rule["importance"] for rule in rules] == [3, 1, 1, 1, 0]

    def test_original_excluded(self):
        rules = validate_rules(parse_rules("RULE education eq School :: Stay at school"), adult_schema())
        cfset = {"original": adult_instance(), "counterfactuals": [adult_instance(education="Masters")]}
        assert count_support(rules, cfset)[0]["importance"] == 0

    def test_conjunction_needs_every_predicate(self):
        rules = validate_rules(
            parse_rules("RULE hpw gt 40 AND gender eq Female :: Long hours"), adult_schema()
        )
        assert rule_satisfied(rules[0], adult_instance(hpw=45, gender="Female"))
        assert not rule_satisfied(rules[0], adult_instance(hpw=45))
        assert not rule_satisfied(rules[0], adult_instance(hpw=40, gender="Female"))

    def test_observation_never_satisfied(self):
        rules = parse_rules("OBSERVATION :: Age never changes")
        assert not rule_satisfied(rules[0], adult_instance())

    def test_rank_stable_on_ties(self):
        ranked = rank_rules(count_support(worked_rules(), worked_cfset()))
        assert [rule["id"] for rule in ranked] == [1, 2, 3, 4, 5]
        assert [rule["rank"] for rule in ranked] == [1, 2, 3, 4, 5]

        rules = worked_rules()
        rules[3] = dict(rules[3], importance=7)
        rules[0] = dict(rules[0], importance=2)
        rules[2] = dict(rules[2], importance=2)
        assert [rule["id"] for rule in rank_rules(rules)] == [4, 1, 3, 2, 5]

    def test_render_support(self):
        rules = rank_rules(count_support(worked_rules(), worked_cfset()))
        lines = render_support(rules).splitlines()
        assert lines[0] == (
            "Number of counterfactuals following Rule 1 "
            "(Higher education (Prof-school, Bachelors, Doctorate) leads to higher income.): 3"
        )
        assert lines[4].endswith("(Hours per week less influential in this case.): 0")


class TestFormatting:
    def test_format_parses_back(self):
        rules = worked_rules()
        again = validate_rules(parse_rules(format_rules(rules)), adult_schema())
        assert [rule["predicate"] for rule in again] == [rule["predicate"] for rule in rules]
        assert [rule["prose"] for rule in again] == [rule["prose"] for rule in rules]

    def test_format_rule(self):
        rules = validate_rules(parse_rules("RULE hpw gt 40.0 :: Busy"), adult_schema())
        assert format_rule(rules[0]) == "RULE hpw gt 40 :: Busy"
        assert format_rule(parse_rules("OBSERVATION :: Note")[0]) == "OBSERVATION :: Note"


class TestDedupe:
    def test_same_predicate_different_order(self):
        text = "\n".join(
            [
                "RULE education in {Bachelors, Doctorate} :: Degrees",
                "RULE education in {Doctorate, Bachelors} :: Degrees again",
                "OBSERVATION :: Age never changes",
                "OBSERVATION :: age never changes ",
                "RULE education in {Doctorate} :: Doctorate only",
            ]
        )
        kept = dedupe_rules(validate_rules(parse_rules(text), adult_schema()))
        assert [rule["id"] for rule in kept] == [1, 3, 5]
        assert [rule["id"] for rule in renumber_rules(kept)] == [1, 2, 3]


def random_rule(rng, schema, rule_id):
    atoms = []
    for index in sorted(rng.choice(len(schema["features"]), size=int(rng.integers(1, 3)), replace=False)):
        feature = schema["features"][int(index)]
        if feature["kind"] == "categorical":
            values = list(rng.choice(feature["values"], size=int(rng.integers(1, 3)), replace=False))
            if len(values) == 1:
                atoms.append({"feature": feature["name"], "op": "eq", "operand": str(values[0])})
            else:
                atoms.append({"feature": feature["name"], "op": "in", "operand": [str(v) for v in values]})
        else:
            lo, hi = feature["range"]
            op = str(rng.choice(["lt", "le", "gt", "ge"]))
            atoms.append({"feature": feature["name"], "op": op, "operand": float(rng.integers(int(lo), int(hi) + 1))})
    return {"id": rule_id, "prose": f"rule {rule_id}", "predicate": atoms, "importance": 0, "rank": None}


def frame_support(rule, frame):
    mask = pd.Series(True, index=frame.index)
    for atom in rule["predicate"]:
        column, operand = frame[atom["feature"]], atom["operand"]
        if atom["op"] == "eq":
            mask &= column == operand
        elif atom["op"] == "in":
            mask &= column.isin(operand)
        elif atom["op"] == "lt":
            mask &= column < operand
        elif atom["op"] == "le":
            mask &= column <= operand
        elif atom["op"] == "gt":
            mask &= column > operand
        else:
            mask &= column >= operand
    return int(mask.sum())


class TestSupportAgainstFrame:
    def test_random_rules(self):
        schema = adult_schema()
        rng = np.random.default_rng(21)
        for trial in range(1000):
            cfs = random_instances(schema, int(rng.integers(1, 6)), seed=trial)
            rules = [random_rule(rng, schema, i) for i in range(1, 4)]
            frame = pd.DataFrame([cf["values"] for cf in cfs])
            counted = count_support(rules, {"original": adult_instance(), "counterfactuals": cfs})
            assert [rule["importance"] for rule in counted] == [frame_support(rule, frame) for rule in rules]

    def test_support_monotonic(self):
        schema = adult_schema()
        rng = np.random.default_rng(22)
        pool = random_instances(schema, 400, seed=23)
        for trial in range(200):
            rules = [random_rule(rng, schema, i) for i in range(1, 4)]
            cfs = random_instances(schema, int(rng.integers(0, 5)), seed=1000 + trial)
            before = count_support(rules, {"original": adult_instance(), "counterfactuals": cfs})
            for index, rule in enumerate(rules):
                satisfying = next((row for row in pool if rule_satisfied(rule, row)), None)
                if satisfying is None:
                    continue
                after = count_support(rules, {"original": adult_instance(), "counterfactuals": cfs + [satisfying]})
                assert after[index]["importance"] == before[index]["importance"] + 1
                assert all(a["importance"] >= b["importance"] for a, b in zip(after, before))
