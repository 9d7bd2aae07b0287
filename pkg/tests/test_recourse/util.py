import json
import numpy as np
import os

from cfx_python.recourse.model import DecisionTree, ForestModel
from cfx_python.recourse.tabular import ADULT_SCHEMA, Dataset, load_schema

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "test_data")
ADULT_SAMPLE = os.path.join(DATA_DIR, "adult_sample.csv")
WORKED_EXAMPLE = os.path.join(
    os.path.dirname(__file__), "..", "..", "cfx_python", "explain", "data", "worked_example.json"
)

HIGHER_EDUCATION = {"Prof-school", "Bachelors", "Doctorate"}


def adult_schema():
    return load_schema(ADULT_SCHEMA)


def worked_example():
    with open(WORKED_EXAMPLE, "r") as fh:
        return json.load(fh)


def adult_instance(label=None, **changes):
    values = {
        "age": 41,
        "workclass": "Private",
        "education": "School",
        "status": "Married",
        "occupation": "Blue-Collar",
        "race": "White",
        "gender": "Male",
        "hpw": 30,
    }
    values.update(changes)
    return {"values": values, "label": label}


class RuleClassifier:
    """Classifier stub: the positive class whenever the predicate holds."""

    def __init__(self, schema, positive):
        self.schema = schema
        self.positive = positive
        self.calls = 0

    def predict_proba(self, instance):
        self.calls += 1
        return 1.0 if self.positive(instance["values"]) else 0.0

    def predict(self, instance):
        negative, positive = self.schema["label"]["classes"]
        return positive if self.predict_proba(instance) >= 0.5 else negative


def worked_example_classifier(schema):
    """Positive for every counterfactual of the bundled worked example and negative for its original."""

    def positive(values):
        return (
            values["education"] in HIGHER_EDUCATION
            or values["occupation"] == "Professional"
            or values["status"] == "Divorced"
            or values["workclass"] == "Self-Employed"
        )

    return RuleClassifier(schema, positive)


def hpw_stump(schema, threshold=40.0):
    """One-tree forest: hpw <= threshold is class 0, above is class 1."""
    tree = DecisionTree()
    root = tree.add_node([8, 8])
    left = tree.add_node([8, 0])
    right = tree.add_node([0, 8])
    tree.feature[root] = [f["name"] for f in schema["features"]].index("hpw")
    tree.threshold[root] = threshold
    tree.left[root] = left
    tree.right[root] = right
    return ForestModel(schema, [tree], max_depth=1, min_leaf=1, features_per_split=8, train_seed=0)


def hpw_dataset(schema, n_rows=20):
    """Rows identical except hpw, which alone decides the label."""
    rows = []
    for i in range(n_rows):
        if i % 2:
            rows.append(adult_instance(label="1", hpw=50))
        else:
            rows.append(adult_instance(label="0", hpw=30))
    return Dataset(schema, rows)


def random_instances(schema, n_rows, seed):
    """Uniformly drawn schema-legal rows without a label."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_rows):
        values = {}
        for feature in schema["features"]:
            if feature["kind"] == "categorical":
                values[feature["name"]] = feature["values"][int(rng.integers(len(feature["values"])))]
            else:
                lo, hi = feature["range"]
                values[feature["name"]] = int(rng.integers(int(lo), int(hi) + 1))
        rows.append({"values": values, "label": None})
    return rows
