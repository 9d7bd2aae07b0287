"""
Model-agnostic diverse counterfactual search

A seeded genetic search over perturbations of the original instance. Candidates are scored by
a hinge validity term plus weighted proximity; valid candidates are archived, sparsified and
a diverse subset of k is selected greedily.
"""

from __future__ import annotations

import json
import numpy as np
from typing import Dict, List, Optional, Sequence, Tuple

from cfx_python.types import (
    CounterfactualSet,
    DatasetSchema,
    FeatureScales,
    FeatureSpec,
    FeatureValues,
    Instance,
    SearchConfig,
    Value,
)

from .constants import (
    CANDIDATE_POOL,
    DEFAULT_GENERATIONS,
    DEFAULT_POPULATION,
    DEFAULT_W_DIVERSITY,
    DEFAULT_W_PROXIMITY,
    DEFAULT_W_VALIDITY,
    FEATURE_KINDS,
    MAD_FLOOR,
    MAX_PERTURBED_FEATURES,
    STALL_GENERATIONS,
)
from .model import Classifier, ForestModel
from .tabular import Dataset, feature_names, instances_to_frame
from .util import NotEnoughValidError, PreconditionError, logger

TOURNAMENT_SIZE = 3
REVERT_RATE = 0.1


def default_search_config(k: int = 5, seed: int = 0, **kwargs) -> SearchConfig:
    config: SearchConfig = {
        "k": k,
        "population": DEFAULT_POPULATION,
        "generations": DEFAULT_GENERATIONS,
        "w_validity": DEFAULT_W_VALIDITY,
        "w_proximity": DEFAULT_W_PROXIMITY,
        "w_diversity": DEFAULT_W_DIVERSITY,
        "seed": seed,
        "immutable_features": [],
    }
    config.update(kwargs)  # type: ignore
    return config


def validate_search_config(config: SearchConfig, schema: DatasetSchema) -> None:
    if config["k"] < 1:
        raise ValueError(f"k must be at least 1 ({config['k']})")
    for weight in ["w_validity", "w_proximity", "w_diversity"]:
        if config[weight] < 0:  # type: ignore
            raise ValueError(f"{weight} must be nonnegative ({config[weight]})")  # type: ignore
    if config["population"] < 2 * config["k"]:
        raise ValueError(
            f"population ({config['population']}) must be at least twice k ({config['k']})"
        )
    if config["generations"] < 0:
        raise ValueError(f"generations must be nonnegative ({config['generations']})")
    unknown = set(config["immutable_features"]) - set(feature_names(schema))
    if unknown:
        raise ValueError(f"unknown immutable features ({', '.join(sorted(unknown))})")


def compute_scales(dataset: Dataset) -> FeatureScales:
    """Median absolute deviation per continuous feature, floored to stay positive."""
    if not len(dataset):
        raise PreconditionError("cannot compute feature scales of an empty dataset")
    mad = {}
    for feature in dataset.schema["features"]:
        if feature["kind"] != FEATURE_KINDS.CONTINUOUS:
            continue
        column = np.array([float(row["values"][feature["name"]]) for row in dataset.rows])
        deviation = float(np.median(np.abs(column - np.median(column))))
        mad[feature["name"]] = max(deviation, MAD_FLOOR)
    return {"mad": mad}


def feature_term(name: str, a: Value, b: Value, scales: FeatureScales) -> float:
    if name in scales["mad"]:
        return abs(float(a) - float(b)) / scales["mad"][name]
    return 0.0 if a == b else 1.0


def distance(a: Instance, b: Instance, scales: FeatureScales) -> float:
    """Mean per-feature distance: MAD-scaled for continuous features, mismatch for categorical."""
    names = list(a["values"])
    if not names:
        return 0.0
    total = sum(feature_term(n, a["values"][n], b["values"][n], scales) for n in names)
    return total / len(names)


def diversity_score(cfs: Sequence[Instance], scales: FeatureScales) -> float:
    """Mean pairwise distance (0 for a singleton)."""
    pairs = [(i, j) for i in range(len(cfs)) for j in range(i + 1, len(cfs))]
    if not pairs:
        return 0.0
    return sum(distance(cfs[i], cfs[j], scales) for i, j in pairs) / len(pairs)


def changed_features(cf: Instance, original: Instance) -> List[str]:
    return [name for name in original["values"] if cf["values"][name] != original["values"][name]]


def predict_many(model: Classifier, instances: Sequence[Instance]) -> List[str]:
    if isinstance(model, ForestModel):
        return model.predict_many(instances)
    return [model.predict(inst) for inst in instances]


def proba_many(model: Classifier, instances: Sequence[Instance]) -> np.ndarray:
    if isinstance(model, ForestModel):
        return model.predict_proba_many(instances)
    return np.array([model.predict_proba(inst) for inst in instances], dtype=float)


def desired_probability(model: Classifier, instances: Sequence[Instance]) -> np.ndarray:
    label = model.schema["label"]
    proba = proba_many(model, instances)
    return proba if label["desired"] == label["classes"][1] else 1.0 - proba


def sparsify(
    cf: Instance,
    original: Instance,
    model: Classifier,
    scales: Optional[FeatureScales] = None,
) -> Instance:
    """
    Revert changed features to their original value while the model keeps the desired class

    Reversions are tried in ascending order of per-feature distance contribution (schema
    order on ties). Without scales, continuous contributions are normalized by the schema range.
    """
    schema = model.schema
    desired = schema["label"]["desired"]
    changed = changed_features(cf, original)
    if len(changed) <= 1:
        return {"values": dict(cf["values"]), "label": cf["label"]}

    specs = {f["name"]: f for f in schema["features"]}

    def contribution(name: str) -> float:
        a, b = cf["values"][name], original["values"][name]
        if scales is not None:
            return feature_term(name, a, b, scales)
        spec = specs[name]
        if spec["kind"] == FEATURE_KINDS.CATEGORICAL:
            return 1.0
        lo, hi = spec["range"]
        return abs(float(a) - float(b)) / max(hi - lo, MAD_FLOOR)

    order = sorted(changed, key=lambda name: (contribution(name), changed.index(name)))
    current = dict(cf["values"])
    for name in order:
        trial = dict(current)
        trial[name] = original["values"][name]
        if trial == original["values"]:
            continue
        if model.predict({"values": trial, "label": None}) == desired:
            current = trial
    return {"values": current, "label": cf["label"]}


class GeneticSearch:
    """One counterfactual search; owns its random stream, so one instance per case."""

    def __init__(
        self,
        model: Classifier,
        original: Instance,
        config: SearchConfig,
        scales: FeatureScales,
    ):
        self.model = model
        self.schema = model.schema
        self.original = original
        self.config = config
        self.scales = scales
        self.rng = np.random.default_rng(config["seed"])
        self.names = feature_names(self.schema)
        immutable = set(config["immutable_features"]) | {
            f["name"] for f in self.schema["features"] if not f["mutable"]
        }
        self.changeable: List[FeatureSpec] = [
            f
            for f in self.schema["features"]
            if f["name"] not in immutable and self._can_change(f)
        ]
        self.archive: Dict[Tuple[Value, ...], Tuple[float, FeatureValues]] = {}

    @staticmethod
    def _can_change(feature: FeatureSpec) -> bool:
        if feature["kind"] == FEATURE_KINDS.CATEGORICAL:
            return len(feature["values"]) > 1
        lo, hi = feature["range"]
        return hi > lo

    def key(self, values: FeatureValues) -> Tuple[Value, ...]:
        return tuple(values[name] for name in self.names)

    def propose(self, feature: FeatureSpec) -> Value:
        current = self.original["values"][feature["name"]]
        if feature["kind"] == FEATURE_KINDS.CATEGORICAL:
            options = [v for v in feature["values"] if v != current]
            return options[int(self.rng.integers(len(options)))]
        lo, hi = feature["range"]
        value = float(self.rng.uniform(lo, hi))
        if feature.get("integer"):
            return int(min(max(round(value), lo), hi))
        return value

    def initial_candidate(self) -> FeatureValues:
        values = dict(self.original["values"])
        n_changes = int(
            self.rng.integers(1, min(MAX_PERTURBED_FEATURES, len(self.changeable)) + 1)
        )
        for index in self.rng.choice(len(self.changeable), size=n_changes, replace=False):
            feature = self.changeable[int(index)]
            values[feature["name"]] = self.propose(feature)
        return values

    def evaluate(self, population: List[FeatureValues]) -> Tuple[List[float], List[bool]]:
        instances = [{"values": values, "label": None} for values in population]
        p_desired = desired_probability(self.model, instances)  # type: ignore
        predicted = predict_many(self.model, instances)  # type: ignore
        desired = self.schema["label"]["desired"]
        fitness, valid = [], []
        for values, p, label in zip(population, p_desired, predicted):
            proximity = distance({"values": values, "label": None}, self.original, self.scales)
            fitness.append(
                self.config["w_validity"] * max(0.0, 0.5 - float(p))
                + self.config["w_proximity"] * proximity
            )
            valid.append(label == desired and values != self.original["values"])
        return fitness, valid

    def tournament(self, ranking: Dict[int, int]) -> int:
        entrants = self.rng.integers(len(ranking), size=TOURNAMENT_SIZE)
        return min((int(i) for i in entrants), key=lambda i: ranking[i])

    def offspring(self, first: FeatureValues, second: FeatureValues) -> FeatureValues:
        child = dict(self.original["values"])
        mutation_rate = 1.0 / len(self.changeable)
        for feature in self.changeable:
            name = feature["name"]
            child[name] = first[name] if self.rng.random() < 0.5 else second[name]
            draw = self.rng.random()
            if draw < mutation_rate:
                child[name] = self.propose(feature)
            elif draw < mutation_rate + REVERT_RATE * mutation_rate:
                child[name] = self.original["values"][name]
        if child == self.original["values"]:
            feature = self.changeable[int(self.rng.integers(len(self.changeable)))]
            child[feature["name"]] = self.propose(feature)
        return child

    def run(self) -> List[Tuple[float, FeatureValues]]:
        """Evolve the population and return the archived valid candidates, best fitness first."""
        if not self.changeable:
            logger.warning("no mutable feature can change; no counterfactuals can be searched")
            return []
        size = self.config["population"]
        population = [self.initial_candidate() for _ in range(size)]
        n_elites = max(2, size // 10)
        best, stalled = np.inf, 0

        for generation in range(self.config["generations"] + 1):
            fitness, valid = self.evaluate(population)
            for values, score, ok in zip(population, fitness, valid):
                if ok:
                    key = self.key(values)
                    if key not in self.archive or score < self.archive[key][0]:
                        self.archive[key] = (score, values)

            scores = [score for score, ok in zip(fitness, valid) if ok]
            if scores and min(scores) < best - 1e-12:
                best, stalled = min(scores), 0
            else:
                stalled += 1
            if len(self.archive) >= self.config["k"] and stalled >= STALL_GENERATIONS:
                logger.debug(f"search stalled after {generation} generations")
                break
            if generation == self.config["generations"]:
                break

            order = sorted(range(size), key=lambda i: (not valid[i], fitness[i], i))
            ranking = {index: position for position, index in enumerate(order)}
            next_population = [population[i] for i in order[:n_elites]]
            while len(next_population) < size:
                first = population[self.tournament(ranking)]
                second = population[self.tournament(ranking)]
                next_population.append(self.offspring(first, second))
            population = next_population

        return sorted(self.archive.values(), key=lambda item: (item[0], self.key(item[1])))


def select_diverse(
    pool: List[Instance], original: Instance, config: SearchConfig, scales: FeatureScales
) -> List[Instance]:
    """Greedy pick of k candidates maximizing w_diversity * diversity - w_proximity * distance."""
    selected: List[Instance] = []
    remaining = list(pool)
    while remaining and len(selected) < config["k"]:
        best_index, best_gain = 0, -np.inf
        for index, candidate in enumerate(remaining):
            gain = config["w_diversity"] * diversity_score(
                selected + [candidate], scales
            ) - config["w_proximity"] * distance(candidate, original, scales)
            if gain > best_gain:
                best_index, best_gain = index, gain
        selected.append(remaining.pop(best_index))
    return selected


def generate_counterfactuals(
    model: Classifier,
    original: Instance,
    config: SearchConfig,
    scales: FeatureScales,
    strict: bool = False,
) -> CounterfactualSet:
    """
    Search up to k valid, sparse and diverse counterfactuals for an instance

    Raises:
        PreconditionError: the model already predicts the desired class for the original
        NotEnoughValidError: (strict only) fewer than k valid counterfactuals were found
    """
    schema = model.schema
    desired = schema["label"]["desired"]
    validate_search_config(config, schema)
    if model.predict(original) == desired:
        raise PreconditionError(f"the original instance is already classified as {desired}")

    search = GeneticSearch(model, original, config, scales)
    archived = search.run()

    pool: List[Instance] = []
    seen = set()
    for _, values in archived[:CANDIDATE_POOL]:
        cf = sparsify({"values": values, "label": desired}, original, model, scales)
        key = search.key(cf["values"])
        if key not in seen and cf["values"] != original["values"]:
            seen.add(key)
            pool.append(cf)

    chosen = select_diverse(pool, original, config, scales)
    result: CounterfactualSet = {
        "original": original,
        "counterfactuals": chosen,
        "distances": [distance(cf, original, scales) for cf in chosen],
        "diversity": diversity_score(chosen, scales),
        "changed_features": [changed_features(cf, original) for cf in chosen],
        "desired": desired,
        "complete": len(chosen) >= config["k"],
    }
    if not result["complete"]:
        message = f"found {len(chosen)} of {config['k']} requested counterfactuals"
        if strict:
            raise NotEnoughValidError(message, result)
        logger.warning(message)
    else:
        logger.debug(f"found {len(chosen)} counterfactuals from {len(archived)} valid candidates")
    return result


def counterfactuals_to_frame(cfset: CounterfactualSet, schema: DatasetSchema):
    """Original row first, then the counterfactuals."""
    return instances_to_frame([cfset["original"]] + cfset["counterfactuals"], schema)


def counterfactual_report(cfset: CounterfactualSet) -> Dict:
    return {
        "original": cfset["original"],
        "counterfactuals": [
            {"values": cf["values"], "distance": dist, "changed_features": changed}
            for cf, dist, changed in zip(
                cfset["counterfactuals"], cfset["distances"], cfset["changed_features"]
            )
        ],
        "diversity": cfset["diversity"],
        "desired": cfset["desired"],
        "complete": cfset["complete"],
    }


def write_counterfactuals(
    cfset: CounterfactualSet,
    schema: DatasetSchema,
    csv_path: str,
    json_path: Optional[str] = None,
) -> None:
    counterfactuals_to_frame(cfset, schema).to_csv(csv_path, index=False, lineterminator="\n")
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(counterfactual_report(cfset), fh, indent=2, sort_keys=True)
