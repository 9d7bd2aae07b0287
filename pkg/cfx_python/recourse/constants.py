import argparse


class IterableNamespace(argparse.Namespace):
    def __init__(self, *pos, **kwargs):
        argparse.Namespace.__init__(self, *pos, **kwargs)

    def keys(self):
        return self.__dict__.keys()

    def items(self):
        return self.__dict__.items()

    def values(self):
        return self.__dict__.values()

    def __getitem__(self, key):
        return getattr(self, key)


FEATURE_KINDS = IterableNamespace(CATEGORICAL="categorical", CONTINUOUS="continuous")

# forest defaults: desk-scale training on ~32k rows
DEFAULT_N_TREES = 50
DEFAULT_MAX_DEPTH = 8
DEFAULT_MIN_LEAF = 5
MODEL_MAGIC = b"CFXF1"
MODEL_FORMAT_VERSION = 1

# counterfactual search defaults
DEFAULT_POPULATION = 200
DEFAULT_GENERATIONS = 50
DEFAULT_W_VALIDITY = 1.0
DEFAULT_W_PROXIMITY = 0.5
DEFAULT_W_DIVERSITY = 1.0
MAD_FLOOR = 1e-6
STALL_GENERATIONS = 10  # stop once k valid exist and the best fitness stalls this long
MAX_PERTURBED_FEATURES = 3
CANDIDATE_POOL = 40  # best valid candidates considered for sparsify + diverse selection

RULE_OPERATORS = IterableNamespace(EQ="eq", IN="in", LT="lt", LE="le", GT="gt", GE="ge")
CATEGORICAL_OPERATORS = {RULE_OPERATORS.EQ, RULE_OPERATORS.IN}
ORDERED_OPERATORS = {RULE_OPERATORS.LT, RULE_OPERATORS.LE, RULE_OPERATORS.GT, RULE_OPERATORS.GE}
RULE_KEYWORD = "RULE"
OBSERVATION_KEYWORD = "OBSERVATION"
PROSE_SEPARATOR = "::"

# embedded verbatim in the cause-extraction prompt
RULE_GRAMMAR = """Write one rule per line using exactly this format:
RULE <feature> <op> <operand> [AND <feature> <op> <operand>]* :: <rule in plain words>
OBSERVATION :: <observation in plain words>
where <op> is one of eq, in, lt, le, gt, ge. Use eq/in only with categorical features and
lt/le/gt/ge only with continuous features. Set operands are written {v1, v2}.
Use OBSERVATION for findings that are not a condition on the counterfactual rows.
Example:
RULE education in {Bachelors, Doctorate} :: Higher education leads to the positive outcome
RULE hpw gt 40 AND occupation eq Professional :: Long hours in a professional role
OBSERVATION :: Age does not change in any counterfactual"""
