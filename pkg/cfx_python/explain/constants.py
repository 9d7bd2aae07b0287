from cfx_python.recourse.constants import IterableNamespace

DEFAULT_BASE_URL = "https://api.openai.com"
DEFAULT_MODEL = "gpt-4o"
CHAT_ENDPOINT = "v1/chat/completions"
API_KEY_ENV = "CFX_LLM_API_KEY"
BASE_URL_ENV = "CFX_LLM_BASE_URL"
MODEL_ENV = "CFX_LLM_MODEL"

STAGES = IterableNamespace(
    EXTRACT_CAUSES="extract_causes",
    EXPLANATION="explanation",
    TOT_MERGE="tot_merge",
    FINAL_EXAMPLE="final_example",
    EVAL_TABLE="eval_table",
)
STRATEGIES = IterableNamespace(ZERO_SHOT="zero_shot", ONE_SHOT="one_shot", TOT="tot")
LLM_MODES = IterableNamespace(LIVE="live", RECORD="record", REPLAY="replay")
EVAL_TABLE_SOURCES = IterableNamespace(NATIVE="native", LLM="llm")
NOVELTY_SPLITS = IterableNamespace(FULL="full", TRAIN="train")

DEFAULT_TEMPERATURE = 0.0
DEFAULT_TOT_TEMPERATURE = 0.7  # branches rely on sampling noise for diverse rules
DEFAULT_MAX_TOKENS = 2048
DEFAULT_TIMEOUT = 60.0
DEFAULT_MAX_IN_FLIGHT = 4
RETRY_TOTAL = 3
RETRY_BACKOFF = 1.0
RETRY_STATUSES = [429, 500, 502, 503, 504]

# ToT: two zero-shot branches and one one-shot branch, seeded seed + branch index
TOT_BRANCHES = [STRATEGIES.ZERO_SHOT, STRATEGIES.ZERO_SHOT, STRATEGIES.ONE_SHOT]

TEMP_CSV = "temp_csv.csv"
EVALUATION_CSV = "evaluation.csv"
EVALUATION_COLUMNS = ["Rule", "Importance", "In explanation"]

REPORT_COLUMNS = IterableNamespace(
    strategy="Strategy",
    k="CFs",
    n_cases="Cases",
    validity_pct="Validity",
    mean_causes_identified="Causes Identified",
    causes_used_pct="Causes used",
    first_cause_used_pct="1st Cause used",
    second_cause_used_pct="2nd Cause used",
    third_cause_used_pct="3rd Cause used",
    in_data_pct="In the data",
)
NOT_APPLICABLE = "n/a"
REPORT_FOOTER = "Rank usage percentages only count cases with at least that many causes."

# exit codes of the command line interface
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PRECONDITION = 3
EXIT_LLM = 4
