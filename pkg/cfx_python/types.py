from __future__ import annotations

from typing import Dict, List, Optional, Union
from typing_extensions import NotRequired, TypedDict

# continuous values are canonicalized to int for integer features, float otherwise
Value = Union[str, int, float]
FeatureValues = Dict[str, Value]


class FeatureSpec(TypedDict):
    name: str
    kind: str  # categorical | continuous
    mutable: bool
    values: NotRequired[List[str]]  # categorical only
    range: NotRequired[List[float]]  # continuous only, [lo, hi]
    integer: NotRequired[bool]  # continuous only


class LabelSpec(TypedDict):
    name: str
    classes: List[str]
    desired: str


class DatasetSchema(TypedDict):
    """Typed tabular metadata, loaded from the schema document."""

    name: str
    description: str
    task: str
    features: List[FeatureSpec]
    label: LabelSpec


class Instance(TypedDict):
    values: FeatureValues
    label: Optional[str]


class FeatureScales(TypedDict):
    mad: Dict[str, float]


class SearchConfig(TypedDict):
    k: int
    population: int
    generations: int
    w_validity: float
    w_proximity: float
    w_diversity: float
    seed: int
    immutable_features: List[str]


class CounterfactualSet(TypedDict):
    original: Instance
    counterfactuals: List[Instance]
    distances: List[float]
    diversity: float
    changed_features: List[List[str]]
    desired: str
    complete: bool  # False when fewer than k valid counterfactuals were found


class AtomicPredicate(TypedDict):
    feature: str
    op: str  # eq | in | lt | le | gt | ge
    operand: Union[Value, List[Value]]


class CauseRule(TypedDict):
    id: int
    prose: str
    predicate: Optional[List[AtomicPredicate]]  # None for observational rules
    importance: int
    rank: Optional[int]


class ChatRequest(TypedDict):
    stage: str
    system_text: str
    user_text: str
    temperature: float
    max_tokens: int


class Completion(TypedDict):
    text: str
    usage: Dict[str, int]
    backend_id: str


class TranscriptEntry(TypedDict):
    key: str
    stage: str
    system: str
    user: str
    temperature: float
    max_tokens: int
    response: str
    ts: str


class BranchResult(TypedDict):
    strategy: str
    seed: int
    cfs: CounterfactualSet
    rules: List[CauseRule]
    support_text: str
    explanation: str


class PromptContext(TypedDict, total=False):
    schema: DatasetSchema
    original: Instance
    cfs: CounterfactualSet
    rules: List[CauseRule]
    support_text: str
    dataset_info: str
    explanation: str
    final_example: Instance
    strategy: str
    branches: List[BranchResult]


class CaseResult(TypedDict):
    case_id: int
    original: Instance
    cfs: CounterfactualSet
    rules: List[CauseRule]
    explanation: str
    transcripts: Dict[str, str]
    strategy: str
    k: int
    seed: int
    branches: List[BranchResult]


class EvaluationRow(TypedDict):
    rule: str
    importance: int
    in_explanation: int


class ClosedLoopRecord(TypedDict):
    case_id: int
    final_example: FeatureValues
    validity: bool
    causes_identified: int
    causes_used: int
    top_used: List[Optional[bool]]  # ranks 1..3, None when the rank does not exist
    in_data: bool
    strategy: str
    k: int


class MetricsReport(TypedDict):
    strategy: str
    k: int
    n_cases: int
    validity_pct: float
    mean_causes_identified: float
    causes_used_pct: Optional[float]
    causes_used_pooled_pct: Optional[float]
    first_cause_used_pct: Optional[float]
    second_cause_used_pct: Optional[float]
    third_cause_used_pct: Optional[float]
    in_data_pct: float


class RunConfig(TypedDict):
    dataset: str
    schema: str
    model: str
    k: int
    strategy: str
    seed: int
    llm_mode: str  # live | record | replay
    transcript: Optional[str]
    out: str
    novelty_split: str  # full | train
    eval_table: str  # native | llm
    dedupe_rules: bool
    jobs: Optional[int]
    n_trees: int
    max_depth: int
    min_leaf: int
    features_per_split: Optional[int]
    population: int
    generations: int
    w_validity: float
    w_proximity: float
    w_diversity: float
    immutable_features: List[str]
    temperature: float
    tot_temperature: float
    max_tokens: int
    timeout: float
    max_in_flight: int
