"""
Read/Validate the dataset schema and tabular data files
"""

from __future__ import annotations

import json
import jsonschema
import numpy as np
import os
import pandas as pd
import re
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from cfx_python.types import DatasetSchema, FeatureSpec, Instance, LabelSpec, Value

from .constants import FEATURE_KINDS
from .util import RowValidationError, SchemaError, logger

SCHEMA_SPECIFICATION = os.path.join(os.path.dirname(__file__), "data", "schema.spec.json")
ADULT_SCHEMA = os.path.join(os.path.dirname(__file__), "data", "adult.schema.json")

RANGE_PATTERN = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*\.\.\s*(-?\d+(?:\.\d+)?)\s*$")


def extend_with_default(validator_class):
    # https://python-jsonschema.readthedocs.io/en/latest/faq/#why-doesn-t-my-schema-s-default-property-set-the-default-on-my-instance
    validate_properties = validator_class.VALIDATORS["properties"]

    def set_defaults(validator, properties, instance, schema):
        for property, subschema in properties.items():
            if "default" in subschema:
                instance.setdefault(property, subschema["default"])

        for error in validate_properties(validator, properties, instance, schema):
            yield error

    return jsonschema.validators.extend(validator_class, validators={"properties": set_defaults})


# Customize the default jsonschema behaviour to add default values
DefaultValidatingDraft7Validator = extend_with_default(jsonschema.Draft7Validator)


def validate_document(content: Dict, schema_file: str) -> None:
    """Validate a JSON document against a bundled specification, filling in defaults."""
    with open(schema_file, "r") as fh:
        schema = json.load(fh)
    DefaultValidatingDraft7Validator(schema).validate(content)


def split_list(value: Sequence[str] | str) -> List[str]:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return [str(v).strip() for v in value]


def parse_range(value: Sequence[float] | str, feature: str) -> List[float]:
    if isinstance(value, str):
        match = RANGE_PATTERN.match(value)
        if not match:
            raise SchemaError(f"malformed numeric range for feature ({feature}): {value!r}")
        lo, hi = float(match.group(1)), float(match.group(2))
    else:
        if len(value) != 2:
            raise SchemaError(f"malformed numeric range for feature ({feature}): {value!r}")
        lo, hi = float(value[0]), float(value[1])
    if lo > hi:
        raise SchemaError(f"range minimum exceeds maximum for feature ({feature}): {lo} > {hi}")
    return [lo, hi]


def normalize_feature(raw: Dict) -> FeatureSpec:
    name = raw["name"]
    feature: FeatureSpec = {"name": name, "kind": raw["kind"], "mutable": raw["mutable"]}

    if raw["kind"] == FEATURE_KINDS.CATEGORICAL:
        if "range" in raw:
            raise SchemaError(f"categorical feature ({name}) cannot declare a range")
        values = split_list(raw.get("values", []))
        if not values:
            raise SchemaError(f"categorical feature ({name}) must list at least one value")
        if len(set(values)) != len(values):
            raise SchemaError(f"categorical feature ({name}) lists a value twice")
        feature["values"] = values
    else:
        if "values" in raw:
            raise SchemaError(f"continuous feature ({name}) cannot declare categorical values")
        if "range" not in raw:
            raise SchemaError(f"continuous feature ({name}) must declare a range")
        feature["range"] = parse_range(raw["range"], name)
        feature["integer"] = bool(raw.get("integer", False))
    return feature


def normalize_schema(content: Dict) -> DatasetSchema:
    """Convert a validated schema document into a DatasetSchema, checking cross-field invariants."""
    features = [normalize_feature(f) for f in content["features"]]

    names = [f["name"] for f in features]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise SchemaError(f"duplicate feature name ({', '.join(duplicates)})")

    raw_label = content["label"]
    classes = split_list(raw_label["classes"])
    if len(classes) != 2 or classes[0] == classes[1]:
        raise SchemaError(f"label ({raw_label['name']}) must have exactly two classes: {classes}")
    desired = raw_label["desired"].strip()
    if desired not in classes:
        raise SchemaError(f"desired class ({desired}) is not one of the label classes {classes}")
    if raw_label["name"] in names:
        raise SchemaError(f"label name ({raw_label['name']}) collides with a feature name")
    label: LabelSpec = {"name": raw_label["name"], "classes": classes, "desired": desired}

    return {
        "name": content["name"],
        "description": content.get("description", ""),
        "task": content.get("task") or f"ML-system that predicts the {label['name']} of a case",
        "features": features,
        "label": label,
    }


def load_schema(path: str, spec_file: str = SCHEMA_SPECIFICATION) -> DatasetSchema:
    """
    Load and validate a schema document

    Raises:
        FileNotFoundError: the schema file does not exist
        SchemaError: the document is malformed or breaks a schema invariant
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing schema file ({path})")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            content = json.load(fh)
        except json.JSONDecodeError as err:
            raise SchemaError(f"schema file ({path}) is not valid JSON: {err}")
    try:
        validate_document(content, spec_file)
    except jsonschema.exceptions.ValidationError as err:
        raise SchemaError(f"schema file ({path}) failed validation: {err.message}")
    schema = normalize_schema(content)
    logger.debug(f"loaded schema {schema['name']} with {len(schema['features'])} features")
    return schema


def feature_names(schema: DatasetSchema) -> List[str]:
    return [f["name"] for f in schema["features"]]


def desired_class(schema: DatasetSchema) -> str:
    return schema["label"]["desired"]


def undesired_class(schema: DatasetSchema) -> str:
    return [c for c in schema["label"]["classes"] if c != schema["label"]["desired"]][0]


def parse_value(feature: FeatureSpec, raw: Value, row: Optional[int] = None) -> Value:
    """Parse and check a single cell against its feature definition."""
    name = feature["name"]
    if feature["kind"] == FEATURE_KINDS.CATEGORICAL:
        value = str(raw).strip()
        if value not in feature["values"]:
            raise RowValidationError(
                f"value {value!r} of feature ({name}) not in {feature['values']}", row, name
            )
        return value

    try:
        number = float(raw)
    except (TypeError, ValueError):
        raise RowValidationError(f"unparseable value {raw!r} for feature ({name})", row, name)
    if np.isnan(number):
        raise RowValidationError(f"missing value for feature ({name})", row, name)
    lo, hi = feature["range"]
    if number < lo or number > hi:
        raise RowValidationError(
            f"value {number} of feature ({name}) outside range {lo}..{hi}", row, name
        )
    if feature.get("integer"):
        if not float(number).is_integer():
            raise RowValidationError(f"non-integer value {raw!r} for feature ({name})", row, name)
        return int(number)
    return number


def parse_row(
    raw: Dict[str, Value], schema: DatasetSchema, row: Optional[int] = None, with_label: bool = True
) -> Instance:
    """Build a validated Instance from a mapping of column name to raw cell."""
    values = {}
    for feature in schema["features"]:
        if feature["name"] not in raw:
            raise RowValidationError(f"missing feature ({feature['name']})", row, feature["name"])
        values[feature["name"]] = parse_value(feature, raw[feature["name"]], row)

    label = None
    label_name = schema["label"]["name"]
    if with_label and label_name in raw and str(raw[label_name]).strip() != "":
        label = str(raw[label_name]).strip()
        # tolerate numeric renderings of the class values (1.0 for 1)
        if label not in schema["label"]["classes"]:
            try:
                as_int = str(int(float(label)))
                if as_int in schema["label"]["classes"]:
                    label = as_int
            except ValueError:
                pass
        if label not in schema["label"]["classes"]:
            raise RowValidationError(
                f"label {label!r} not in {schema['label']['classes']}", row, label_name
            )
    return {"values": values, "label": label}


def validate_instance(instance: Instance, schema: DatasetSchema) -> None:
    """Check every schema feature has exactly one legal value."""
    names = set(feature_names(schema))
    extra = set(instance["values"]) - names
    if extra:
        raise RowValidationError(f"unknown features ({', '.join(sorted(extra))})")
    for feature in schema["features"]:
        if feature["name"] not in instance["values"]:
            raise RowValidationError(f"missing feature ({feature['name']})", None, feature["name"])
        parse_value(feature, instance["values"][feature["name"]])
    if instance["label"] is not None and instance["label"] not in schema["label"]["classes"]:
        raise RowValidationError(f"label {instance['label']!r} not in the label classes")


def feature_key(instance: Instance, schema: DatasetSchema) -> Tuple[Value, ...]:
    return tuple(instance["values"][name] for name in feature_names(schema))


class Dataset:
    """Schema plus validated rows; immutable after construction."""

    def __init__(self, schema: DatasetSchema, rows: Iterable[Instance]):
        self.schema = schema
        self.rows: Tuple[Instance, ...] = tuple(rows)
        self.keys = frozenset(feature_key(row, schema) for row in self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, indices: Iterable[int]) -> Dataset:
        return Dataset(self.schema, [self.rows[i] for i in indices])


def load_dataset(path: str, schema: DatasetSchema) -> Dataset:
    """
    Read a CSV file of labelled rows and validate every row against the schema

    Raises:
        FileNotFoundError: the csv file does not exist
        SchemaError: the header does not match the schema columns
        RowValidationError: a cell is unparseable or not schema-legal (reports the row number)
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing dataset file ({path})")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    expected = feature_names(schema) + [schema["label"]["name"]]
    header = [str(c).strip() for c in frame.columns]
    if sorted(header) != sorted(expected) or len(header) != len(expected):
        raise SchemaError(f"header mismatch: expected {expected} but found {header}")
    frame.columns = header

    rows = []
    for row_number, raw in enumerate(frame.to_dict("records"), start=1):
        rows.append(parse_row(raw, schema, row_number))
    logger.info(f"loaded {len(rows)} rows from {path}")
    return Dataset(schema, rows)


def contains_instance(dataset: Dataset, instance: Instance) -> bool:
    """True iff some dataset row matches the instance on every feature (label ignored)."""
    return feature_key(instance, dataset.schema) in dataset.keys


def instances_to_frame(instances: Sequence[Instance], schema: DatasetSchema) -> pd.DataFrame:
    columns = feature_names(schema) + [schema["label"]["name"]]
    records = []
    for instance in instances:
        record: Dict[str, Value] = dict(instance["values"])
        record[schema["label"]["name"]] = instance["label"] if instance["label"] is not None else ""
        records.append(record)
    return pd.DataFrame.from_records(records, columns=columns).astype(object)


def write_instances_csv(instances: Sequence[Instance], schema: DatasetSchema, path: str) -> None:
    instances_to_frame(instances, schema).to_csv(path, index=False, lineterminator="\n")


def serialize_instances(instances: Sequence[Instance], schema: DatasetSchema) -> str:
    """Plain-text table of the instances in schema column order, used inside prompts."""
    columns = feature_names(schema)
    if any(instance["label"] is not None for instance in instances):
        columns.append(schema["label"]["name"])
    if not instances:
        return " ".join(columns)
    frame = instances_to_frame(instances, schema)[columns]
    return frame.to_string(index=False)


def describe_feature(feature: FeatureSpec) -> str:
    if feature["kind"] == FEATURE_KINDS.CATEGORICAL:
        return f"- {feature['name']} (categorical): {', '.join(feature['values'])}"
    lo, hi = feature["range"]
    kind = "integer" if feature.get("integer") else "numeric"
    if feature.get("integer"):
        lo, hi = int(lo), int(hi)  # type: ignore
    return f"- {feature['name']} (continuous): {kind} values in range {lo}..{hi}"


def dataset_info(schema: DatasetSchema) -> str:
    """The "Dataset info" prompt block, generated from the schema so prompts match validation."""
    lines = []
    if schema["description"]:
        lines.append(schema["description"])
    lines.append("Columns:")
    lines.extend(describe_feature(f) for f in schema["features"])
    label = schema["label"]
    lines.append(
        f"- {label['name']} (label): {', '.join(label['classes'])}; desired outcome {label['desired']}"
    )
    return "\n".join(lines)


def split_indices(
    n_rows: int, seed: int, test_fraction: float = 0.2
) -> Tuple[List[int], List[int]]:
    """Seeded train/test split of row indices."""
    order = np.random.default_rng(seed).permutation(n_rows)
    n_test = int(round(n_rows * test_fraction))
    return sorted(int(i) for i in order[n_test:]), sorted(int(i) for i in order[:n_test])
