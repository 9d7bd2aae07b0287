"""
Seeded random-forest binary classifier over a tabular schema
"""

from __future__ import annotations

import json
import math
import numpy as np
import struct
from tqdm import tqdm
from typing import Dict, List, Optional, Sequence, Tuple
from typing_extensions import Protocol

from cfx_python.types import DatasetSchema, Instance

from .constants import (
    DEFAULT_MAX_DEPTH,
    DEFAULT_MIN_LEAF,
    DEFAULT_N_TREES,
    FEATURE_KINDS,
    MODEL_FORMAT_VERSION,
    MODEL_MAGIC,
)
from .tabular import Dataset, feature_names
from .util import PreconditionError, logger

HEADER = struct.Struct("<II")  # format version, payload length
UNKNOWN_CATEGORY = -1


class Classifier(Protocol):
    """Anything that can score instances of a schema; the forest is the reference implementation."""

    schema: DatasetSchema

    def predict(self, instance: Instance) -> str:
        ...

    def predict_proba(self, instance: Instance) -> float:
        ...


def gini(n, ones):
    """Gini impurity of a two-class node, elementwise over arrays of counts."""
    n = np.asarray(n, dtype=float)
    p1 = np.divide(ones, n, out=np.zeros_like(n), where=n > 0)
    return 1.0 - p1**2 - (1.0 - p1) ** 2


def split_score(n_left, ones_left, n_right, ones_right):
    total = n_left + n_right
    return (n_left * gini(n_left, ones_left) + n_right * gini(n_right, ones_right)) / total


def encode_instances(schema: DatasetSchema, instances: Sequence[Instance]) -> np.ndarray:
    """Numeric matrix of the instances: category index (or -1 when unknown) and raw continuous values."""
    encoded = np.zeros((len(instances), len(schema["features"])), dtype=float)
    for column, feature in enumerate(schema["features"]):
        name = feature["name"]
        if feature["kind"] == FEATURE_KINDS.CATEGORICAL:
            index = {value: i for i, value in enumerate(feature["values"])}
            encoded[:, column] = [
                index.get(str(inst["values"][name]), UNKNOWN_CATEGORY) for inst in instances
            ]
        else:
            encoded[:, column] = [float(inst["values"][name]) for inst in instances]
    return encoded


def encode_labels(schema: DatasetSchema, instances: Sequence[Instance]) -> np.ndarray:
    positive = schema["label"]["classes"][1]
    return np.array([1 if inst["label"] == positive else 0 for inst in instances], dtype=int)


class DecisionTree:
    """
    Flat (preorder) binary tree

    Leaves have feature == -1. Internal nodes send a row left when x <= threshold (continuous)
    or when the category is in the node's category set. Categories absent from the node's
    training rows follow the child with the larger training count (left on a tie).
    """

    def __init__(self):
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.categories: List[List[int]] = []
        self.seen: List[List[int]] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.counts: List[List[int]] = []

    def __len__(self) -> int:
        return len(self.feature)

    def add_node(self, counts: Sequence[int]) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.categories.append([])
        self.seen.append([])
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append([int(counts[0]), int(counts[1])])
        return len(self.feature) - 1

    def to_dict(self) -> Dict:
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "categories": self.categories,
            "seen": self.seen,
            "left": self.left,
            "right": self.right,
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, content: Dict) -> DecisionTree:
        tree = cls()
        tree.feature = [int(f) for f in content["feature"]]
        tree.threshold = [float(t) for t in content["threshold"]]
        tree.categories = [[int(c) for c in cats] for cats in content["categories"]]
        tree.seen = [[int(c) for c in cats] for cats in content["seen"]]
        tree.left = [int(i) for i in content["left"]]
        tree.right = [int(i) for i in content["right"]]
        tree.counts = [[int(c) for c in counts] for counts in content["counts"]]
        return tree


class CompiledTree:
    """Array form of a DecisionTree for vectorized prediction."""

    def __init__(self, tree: DecisionTree, n_columns: int):
        self.feature = np.array(tree.feature, dtype=int)
        self.threshold = np.array(tree.threshold, dtype=float)
        self.left = np.array(tree.left, dtype=int)
        self.right = np.array(tree.right, dtype=int)
        counts = np.array(tree.counts, dtype=float)
        self.fraction = counts[:, 1] / counts.sum(axis=1)
        self.is_categorical = np.array([bool(seen) for seen in tree.seen], dtype=bool)

        # last column holds the route for categories unknown to the schema
        self.unknown_column = n_columns
        self.goes_left = np.zeros((len(tree), n_columns + 1), dtype=bool)
        for node, seen in enumerate(tree.seen):
            if not seen:
                continue
            left, right = tree.left[node], tree.right[node]
            larger_is_left = sum(tree.counts[left]) >= sum(tree.counts[right])
            self.goes_left[node, :] = larger_is_left
            for category in seen:
                self.goes_left[node, category] = category in tree.categories[node]

    def leaf_fractions(self, encoded: np.ndarray) -> np.ndarray:
        node = np.zeros(encoded.shape[0], dtype=int)
        while True:
            rows = np.nonzero(self.feature[node] >= 0)[0]
            if not len(rows):
                return self.fraction[node]
            nodes = node[rows]
            values = encoded[rows, self.feature[nodes]]
            categorical = self.is_categorical[nodes]
            column = np.where(categorical, values, 0).astype(int)
            column[column < 0] = self.unknown_column
            go_left = np.where(
                categorical, self.goes_left[nodes, column], values <= self.threshold[nodes]
            )
            node[rows] = np.where(go_left, self.left[nodes], self.right[nodes])


class ForestModel:
    """Trained forest; immutable after construction so concurrent prediction is safe."""

    def __init__(
        self,
        schema: DatasetSchema,
        trees: List[DecisionTree],
        max_depth: int,
        min_leaf: int,
        features_per_split: int,
        train_seed: int,
    ):
        self.schema = schema
        self.trees = trees
        self.n_trees = len(trees)
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.features_per_split = features_per_split
        self.train_seed = train_seed
        cardinality = max(
            [len(f.get("values", [])) for f in schema["features"]] + [1]
        )
        self._compiled = [CompiledTree(tree, cardinality) for tree in trees]

    def predict_proba_many(self, instances: Sequence[Instance]) -> np.ndarray:
        """Mean per-tree leaf fraction of the second label class, for each instance."""
        if not instances:
            return np.zeros(0)
        encoded = encode_instances(self.schema, instances)
        total = np.zeros(encoded.shape[0])
        for tree in self._compiled:
            total += tree.leaf_fractions(encoded)
        return total / self.n_trees

    def predict_many(self, instances: Sequence[Instance]) -> List[str]:
        negative, positive = self.schema["label"]["classes"]
        return [positive if p >= 0.5 else negative for p in self.predict_proba_many(instances)]

    def predict_proba(self, instance: Instance) -> float:
        return float(self.predict_proba_many([instance])[0])

    def predict(self, instance: Instance) -> str:
        return self.predict_many([instance])[0]

    def to_dict(self) -> Dict:
        return {
            "schema": self.schema,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "features_per_split": self.features_per_split,
            "train_seed": self.train_seed,
            "trees": [tree.to_dict() for tree in self.trees],
        }


def predict(model: Classifier, instance: Instance) -> str:
    return model.predict(instance)


def predict_proba(model: Classifier, instance: Instance) -> float:
    return model.predict_proba(instance)


def best_continuous_split(
    values: np.ndarray, labels: np.ndarray, min_leaf: int
) -> Optional[Tuple[float, float]]:
    """(score, threshold) of the best x <= threshold split, thresholds drawn from the observed values."""
    order = np.argsort(values, kind="stable")
    ordered, ordered_labels = values[order], labels[order]
    n_rows = len(ordered)
    boundaries = np.nonzero(ordered[:-1] != ordered[1:])[0]
    n_left = boundaries + 1
    feasible = (n_left >= min_leaf) & (n_rows - n_left >= min_leaf)
    if not feasible.any():
        return None
    boundaries, n_left = boundaries[feasible], n_left[feasible]
    ones = np.cumsum(ordered_labels)
    ones_left = ones[boundaries]
    scores = split_score(n_left, ones_left, n_rows - n_left, ones[-1] - ones_left)
    best = int(np.argmin(scores))
    return float(scores[best]), float(ordered[boundaries[best]])


def best_categorical_split(
    values: np.ndarray, labels: np.ndarray, n_categories: int, min_leaf: int
) -> Optional[Tuple[float, List[int], List[int]]]:
    """(score, category set, categories present) of the best set split, growing the set greedily."""
    categories = values.astype(int)
    totals = np.bincount(categories, minlength=n_categories)
    ones = np.bincount(categories, weights=labels, minlength=n_categories)
    present = [c for c in range(n_categories) if totals[c] > 0]
    if len(present) < 2:
        return None

    n_rows, n_ones = len(values), float(ones.sum())
    chosen: List[int] = []
    size_left, ones_left = 0, 0.0
    best_score = math.inf
    while len(chosen) < len(present) - 1:
        trial = None
        for category in present:
            if category in chosen:
                continue
            n_left = size_left + totals[category]
            if n_left < min_leaf or n_rows - n_left < min_leaf:
                continue
            score = float(
                split_score(
                    n_left,
                    ones_left + ones[category],
                    n_rows - n_left,
                    n_ones - ones_left - ones[category],
                )
            )
            if trial is None or score < trial[0]:
                trial = (score, category)
        if trial is None or trial[0] >= best_score:
            break
        best_score = trial[0]
        chosen.append(trial[1])
        size_left += totals[trial[1]]
        ones_left += ones[trial[1]]

    if not chosen:
        return None
    return best_score, sorted(chosen), present


def grow_tree(
    schema: DatasetSchema,
    encoded: np.ndarray,
    labels: np.ndarray,
    max_depth: int,
    min_leaf: int,
    features_per_split: int,
    rng: np.random.Generator,
) -> DecisionTree:
    tree = DecisionTree()
    cardinality = [len(f.get("values", [])) for f in schema["features"]]
    categorical = [f["kind"] == FEATURE_KINDS.CATEGORICAL for f in schema["features"]]

    def grow(rows: np.ndarray, depth: int) -> int:
        node_labels = labels[rows]
        n_ones = int(node_labels.sum())
        node = tree.add_node([len(rows) - n_ones, n_ones])
        if depth >= max_depth or n_ones in (0, len(rows)) or len(rows) < 2 * min_leaf:
            return node

        parent = float(gini(len(rows), n_ones))
        best = None
        candidates = rng.choice(encoded.shape[1], size=features_per_split, replace=False)
        for column in candidates:
            column = int(column)
            values = encoded[rows, column]
            if categorical[column]:
                found = best_categorical_split(values, node_labels, cardinality[column], min_leaf)
                if found and (best is None or found[0] < best[0]):
                    best = (found[0], column, 0.0, found[1], found[2])
            else:
                split = best_continuous_split(values, node_labels, min_leaf)
                if split and (best is None or split[0] < best[0]):
                    best = (split[0], column, split[1], [], [])

        if best is None or best[0] >= parent:
            return node

        score, column, threshold, category_set, present = best
        values = encoded[rows, column]
        if categorical[column]:
            go_left = np.isin(values.astype(int), category_set)
        else:
            go_left = values <= threshold
        tree.feature[node] = column
        tree.threshold[node] = threshold
        tree.categories[node] = [int(c) for c in category_set]
        tree.seen[node] = [int(c) for c in present]
        tree.left[node] = grow(rows[go_left], depth + 1)
        tree.right[node] = grow(rows[~go_left], depth + 1)
        return node

    grow(np.arange(len(labels)), 0)
    return tree


def train_forest(
    dataset: Dataset,
    n_trees: int = DEFAULT_N_TREES,
    max_depth: int = DEFAULT_MAX_DEPTH,
    min_leaf: int = DEFAULT_MIN_LEAF,
    features_per_split: Optional[int] = None,
    seed: int = 0,
    allow_single_class: bool = False,
    show_progress: bool = False,
) -> ForestModel:
    """
    Train a forest of n_trees Gini trees, each on a seeded bootstrap sample

    Each tree draws from its own random stream derived from (seed, tree index), so the
    result does not depend on the order trees are grown in.

    Raises:
        PreconditionError: empty dataset, single-class dataset or non-positive parameters
    """
    schema = dataset.schema
    n_features = len(schema["features"])
    if features_per_split is None:
        features_per_split = int(math.ceil(math.sqrt(n_features)))
    if min(n_trees, max_depth, min_leaf, features_per_split) < 1:
        raise PreconditionError("forest parameters must be positive")
    features_per_split = min(features_per_split, n_features)
    if not len(dataset):
        raise PreconditionError("cannot train on an empty dataset")

    encoded = encode_instances(schema, dataset.rows)
    labels = encode_labels(schema, dataset.rows)
    if len(set(labels.tolist())) < 2 and not allow_single_class:
        raise PreconditionError("training data must contain rows of both label classes")

    iterfunc = tqdm if show_progress else iter
    trees = []
    for tree_index in iterfunc(range(n_trees)):
        rng = np.random.default_rng([seed, tree_index])
        sample = rng.integers(0, len(labels), len(labels))
        trees.append(
            grow_tree(
                schema,
                encoded[sample],
                labels[sample],
                max_depth,
                min_leaf,
                features_per_split,
                rng,
            )
        )
    logger.info(
        f"trained {n_trees} trees (max_depth={max_depth}, min_leaf={min_leaf}, features_per_split={features_per_split})"
    )
    return ForestModel(schema, trees, max_depth, min_leaf, features_per_split, seed)


def accuracy(model: Classifier, instances: Sequence[Instance]) -> float:
    if not instances:
        return 0.0
    if isinstance(model, ForestModel):
        predicted = model.predict_many(instances)
    else:
        predicted = [model.predict(inst) for inst in instances]
    return sum(p == inst["label"] for p, inst in zip(predicted, instances)) / len(instances)


def dumps_model(model: ForestModel) -> bytes:
    payload = json.dumps(model.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MODEL_MAGIC + HEADER.pack(MODEL_FORMAT_VERSION, len(payload)) + payload


def loads_model(content: bytes) -> ForestModel:
    if not content.startswith(MODEL_MAGIC):
        raise ValueError("not a forest model file (bad magic header)")
    offset = len(MODEL_MAGIC)
    version, length = HEADER.unpack_from(content, offset)
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version ({version})")
    payload = content[offset + HEADER.size :]
    if len(payload) != length:
        raise ValueError(f"truncated model file: expected {length} bytes but found {len(payload)}")
    data = json.loads(payload.decode("utf-8"))
    return ForestModel(
        data["schema"],
        [DecisionTree.from_dict(tree) for tree in data["trees"]],
        data["max_depth"],
        data["min_leaf"],
        data["features_per_split"],
        data["train_seed"],
    )


def save_model(model: ForestModel, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model))
    logger.info(f"wrote model ({model.n_trees} trees) to {path}")


def load_model(path: str) -> ForestModel:
    with open(path, "rb") as fh:
        return loads_model(fh.read())


def check_model_schema(model: ForestModel, schema: DatasetSchema) -> None:
    if feature_names(model.schema) != feature_names(schema):
        raise PreconditionError(
            f"model features {feature_names(model.schema)} do not match schema features {feature_names(schema)}"
        )
