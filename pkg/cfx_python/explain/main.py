from __future__ import annotations

import requests

import argparse
import datetime
import json
import jsonschema.exceptions
import logging
import numpy as np
import os
from argparse import ArgumentDefaultsHelpFormatter, ArgumentParser
from concurrent.futures import ThreadPoolExecutor
from tqdm import tqdm
from typing import Dict, List, Optional, Sequence, Tuple

from cfx_python.recourse.cfgen import compute_scales, predict_many
from cfx_python.recourse.model import (
    ForestModel,
    accuracy,
    check_model_schema,
    load_model,
    save_model,
    train_forest,
)
from cfx_python.recourse.tabular import (
    ADULT_SCHEMA,
    Dataset,
    load_dataset,
    load_schema,
    split_indices,
    validate_document,
)
from cfx_python.recourse.util import PreconditionError, RowValidationError, SchemaError
from cfx_python.types import ClosedLoopRecord, DatasetSchema, RunConfig

from .connection import Backend
from .constants import (
    EVAL_TABLE_SOURCES,
    EXIT_LLM,
    EXIT_OK,
    EXIT_PRECONDITION,
    EXIT_USAGE,
    LLM_MODES,
    NOVELTY_SPLITS,
    STRATEGIES,
)
from .evalloop import aggregate, evaluate_case, format_report, read_records, write_records, write_report
from .pipeline import explain_case, load_case, stage_errors, write_case
from .util import LOG_LEVELS, LlmConfigError, LlmError, ReplayMiss, StageError, logger

CONFIG_SPECIFICATION = os.path.join(os.path.dirname(__file__), "data", "config.spec.json")
SEARCH_KEYS = ["population", "generations", "w_validity", "w_proximity", "w_diversity", "immutable_features"]
RECORDS_FILE = "records.jsonl"
RECORD_FILE = "record.json"


def file_path(path: str) -> str:
    if not os.path.exists(path):
        raise argparse.ArgumentTypeError(f"{repr(path)} is not a valid filename. does not exist")
    return path


def timestamp() -> str:
    return datetime.datetime.now().strftime("%Y%m%dT%H%M%S")


def load_config(path: Optional[str] = None, overrides: Dict = {}) -> RunConfig:
    """
    Merge the config file and explicit overrides over the documented defaults

    Raises:
        jsonschema.exceptions.ValidationError: unknown keys or out-of-range values
        ValueError: mode-specific fields are missing
    """
    content: Dict = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            content = json.load(fh)
        if not isinstance(content, dict):
            raise ValueError(f"config file ({path}) must hold a JSON object")
    content.update({key: value for key, value in overrides.items() if value is not None})
    validate_document(content, CONFIG_SPECIFICATION)
    if content["llm_mode"] in (LLM_MODES.REPLAY, LLM_MODES.RECORD) and not content["transcript"]:
        raise ValueError(f"llm mode {content['llm_mode']} requires a transcript path")
    return content  # type: ignore


def search_overrides(config: RunConfig) -> Dict:
    return {key: config[key] for key in SEARCH_KEYS}  # type: ignore


def resolve_schema(config: RunConfig) -> DatasetSchema:
    return load_schema(config["schema"] or ADULT_SCHEMA)


def require_dataset(config: RunConfig) -> Tuple[DatasetSchema, Dataset]:
    if not config["dataset"]:
        raise ValueError("a dataset path is required (--dataset or the config file)")
    schema = resolve_schema(config)
    return schema, load_dataset(config["dataset"], schema)


def load_inputs(config: RunConfig) -> Tuple[DatasetSchema, Dataset, ForestModel]:
    schema, dataset = require_dataset(config)
    if not os.path.exists(config["model"]):
        raise FileNotFoundError(f"missing model file ({config['model']}); run `cfx train` first")
    model = load_model(config["model"])
    check_model_schema(model, schema)
    return schema, dataset, model


def make_backend(config: RunConfig) -> Backend:
    return Backend.from_config(
        config["llm_mode"],
        config["transcript"],
        timeout=config["timeout"],
        max_in_flight=config["max_in_flight"],
    )


def run_directory(config: RunConfig) -> str:
    """A fresh directory under out, named by timestamp and seed."""
    base = os.path.join(config["out"], f"{timestamp()}_seed{config['seed']}")
    path, suffix = base, 1
    while os.path.exists(path):
        path = f"{base}_{suffix}"
        suffix += 1
    os.makedirs(path)
    return path


def novelty_dataset(config: RunConfig, dataset: Dataset, model: ForestModel) -> Dataset:
    if config["novelty_split"] == NOVELTY_SPLITS.TRAIN:
        train, _ = split_indices(len(dataset), model.train_seed)
        return dataset.subset(train)
    return dataset


def select_cases(model: ForestModel, dataset: Dataset, n_cases: int, seed: int) -> List[int]:
    """The first n rows of a seeded shuffle that the model places outside the desired class."""
    desired = model.schema["label"]["desired"]
    predicted = predict_many(model, dataset.rows)
    order = np.random.default_rng(seed).permutation(len(dataset))
    eligible = [int(i) for i in order if predicted[int(i)] != desired]
    if len(eligible) < n_cases:
        logger.warning(f"only {len(eligible)} eligible cases for the {n_cases} requested")
    return eligible[:n_cases]


def cmd_train(config: RunConfig, force: bool = False, show_progress: bool = False) -> str:
    if os.path.exists(config["model"]) and not force:
        raise ValueError(f"model file ({config['model']}) exists; use --force to overwrite it")
    _, dataset = require_dataset(config)
    train, test = split_indices(len(dataset), config["seed"])
    model = train_forest(
        dataset.subset(train),
        n_trees=config["n_trees"],
        max_depth=config["max_depth"],
        min_leaf=config["min_leaf"],
        features_per_split=config["features_per_split"],
        seed=config["seed"],
        show_progress=show_progress,
    )
    held_out = dataset.subset(test).rows
    print(f"held-out accuracy: {accuracy(model, held_out):.4f} ({len(held_out)} rows)")
    save_model(model, config["model"])
    return config["model"]


def cmd_explain(config: RunConfig, case_id: int) -> str:
    schema, dataset, model = load_inputs(config)
    backend = make_backend(config)
    case = explain_case(
        backend,
        model,
        dataset,
        case_id,
        k=config["k"],
        strategy=config["strategy"],
        seed=config["seed"],
        search=search_overrides(config),
        temperature=config["temperature"],
        tot_temperature=config["tot_temperature"],
        max_tokens=config["max_tokens"],
        dedupe_rules=config["dedupe_rules"],
    )
    case_dir = os.path.join(run_directory(config), str(case_id))
    write_case(case, schema, case_dir)
    print(case["explanation"])
    print(f"case written to {case_dir}")
    return case_dir


def cmd_evaluate(config: RunConfig, case_dir: str) -> ClosedLoopRecord:
    """Re-score a previously explained case; the record is written next to the case artifacts."""
    schema, dataset, model = load_inputs(config)
    case = load_case(case_dir)
    record = evaluate_case(
        make_backend(config),
        model,
        novelty_dataset(config, dataset, model),
        case,
        case_dir,
        eval_table=config["eval_table"],
        temperature=config["temperature"],
        max_tokens=config["max_tokens"],
    )
    write_case(case, schema, case_dir)
    with open(os.path.join(case_dir, RECORD_FILE), "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    print(json.dumps(record, indent=2, sort_keys=True))
    return record


def skippable(err: StageError) -> bool:
    return isinstance(err.cause, (LlmError, PreconditionError)) and not isinstance(
        err.cause, (ReplayMiss, LlmConfigError)
    )


def cmd_experiment(config: RunConfig, n_cases: int, show_progress: bool = False) -> str:
    if n_cases < 1:
        raise ValueError(f"the number of cases must be at least 1 ({n_cases})")
    schema, dataset, model = load_inputs(config)
    backend = make_backend(config)
    scales = compute_scales(dataset)
    reference = novelty_dataset(config, dataset, model)
    cases = select_cases(model, dataset, n_cases, config["seed"])
    run_dir = run_directory(config)

    def run_case(case_id: int) -> Optional[ClosedLoopRecord]:
        case_dir = os.path.join(run_dir, "cases", str(case_id))
        try:
            case = explain_case(
                backend,
                model,
                dataset,
                case_id,
                k=config["k"],
                strategy=config["strategy"],
                seed=config["seed"],
                scales=scales,
                search=search_overrides(config),
                temperature=config["temperature"],
                tot_temperature=config["tot_temperature"],
                max_tokens=config["max_tokens"],
                dedupe_rules=config["dedupe_rules"],
            )
            write_case(case, schema, case_dir)
            with stage_errors("evaluation"):
                record = evaluate_case(
                    backend,
                    model,
                    reference,
                    case,
                    case_dir,
                    eval_table=config["eval_table"],
                    temperature=config["temperature"],
                    max_tokens=config["max_tokens"],
                )
        except StageError as err:
            if not skippable(err):
                raise
            logger.error(f"case {case_id} aborted: {err}")
            return None
        return record

    jobs = config["jobs"] or os.cpu_count() or 1
    if config["llm_mode"] != LLM_MODES.REPLAY:
        jobs = min(jobs, config["max_in_flight"])
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        results = executor.map(run_case, cases)
        if show_progress:
            results = tqdm(results, total=len(cases))
        records = [record for record in results if record is not None]

    write_records(records, os.path.join(run_dir, RECORDS_FILE))
    if records:
        reports = aggregate(records)
        write_report(reports, os.path.join(run_dir, "report.csv"), os.path.join(run_dir, "report.json"))
        print(format_report(reports))
    else:
        logger.warning("no case completed; no report written")
    print(f"experiment written to {run_dir}")
    return run_dir


def cmd_report(
    records_path: str, group_by: Sequence[str] = ("strategy", "k"), csv_path: Optional[str] = None
) -> str:
    records = read_records(records_path)
    reports = aggregate(records, group_by)
    csv_path = csv_path or os.path.join(os.path.dirname(os.path.abspath(records_path)), "report.csv")
    write_report(reports, csv_path, os.path.splitext(csv_path)[0] + ".json")
    text = format_report(reports)
    print(text)
    return text


def exit_code(err: Exception) -> int:
    if isinstance(err, StageError):
        err = err.cause  # type: ignore
    if isinstance(err, LlmConfigError):
        return EXIT_USAGE
    if isinstance(err, PreconditionError):
        return EXIT_PRECONDITION
    if isinstance(err, (LlmError, requests.exceptions.RequestException)):
        return EXIT_LLM
    return EXIT_USAGE


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=file_path, help="JSON run configuration")
    common.add_argument("--dataset", help="labelled CSV dataset")
    common.add_argument("--schema", help="schema document (defaults to the bundled adult schema)")
    common.add_argument("--model", help="forest model file")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int, help="number of counterfactuals")
    common.add_argument("--strategy", choices=STRATEGIES.values())
    common.add_argument("--llm-mode", dest="llm_mode", choices=LLM_MODES.values())
    common.add_argument("--transcript", help="JSONL transcript for record/replay")
    common.add_argument("--out", help="directory receiving per-run output directories")
    common.add_argument("--jobs", type=int, help="worker threads for experiments")
    common.add_argument("--novelty-split", dest="novelty_split", choices=NOVELTY_SPLITS.values())
    common.add_argument("--eval-table", dest="eval_table", choices=EVAL_TABLE_SOURCES.values())
    common.add_argument(
        "--dedupe-rules",
        dest="dedupe_rules",
        action="store_const",
        const=True,
        help="drop repeated rules when merging tree-of-thought branches",
    )
    common.add_argument("--log_level", default="info", choices=LOG_LEVELS.keys())
    common.add_argument("--progress", default=False, action="store_true", help="show progress bars")

    parser = ArgumentParser(prog="cfx", formatter_class=ArgumentDefaultsHelpFormatter)
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", parents=[common], help="train the forest model")
    train.add_argument("--force", default=False, action="store_true", help="overwrite the model file")

    explain = commands.add_parser("explain", parents=[common], help="explain one dataset row")
    explain.add_argument("--case", type=int, required=True, help="dataset row index")

    experiment = commands.add_parser("experiment", parents=[common], help="explain and evaluate many rows")
    experiment.add_argument("--n-cases", dest="n_cases", type=int, required=True)

    evaluate = commands.add_parser("evaluate", parents=[common], help="closed-loop evaluation of a case")
    evaluate.add_argument("--case-dir", dest="case_dir", type=file_path, required=True)

    report = commands.add_parser("report", parents=[common], help="aggregate a records file")
    report.add_argument("records", type=file_path, help="records JSONL file")
    report.add_argument(
        "--group-by", dest="group_by", nargs="+", default=["strategy", "k"], choices=["strategy", "k"]
    )
    report.add_argument("--csv", help="report CSV path (defaults to report.csv next to the records)")
    return parser


def command_interface(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=LOG_LEVELS[args.log_level],
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        datefmt="%m-%d-%y %H:%M:%S",
    )
    overrides = {
        key: getattr(args, key, None)
        for key in [
            "dataset",
            "schema",
            "model",
            "seed",
            "k",
            "strategy",
            "llm_mode",
            "transcript",
            "out",
            "jobs",
            "novelty_split",
            "eval_table",
            "dedupe_rules",
        ]
    }
    try:
        if args.command == "report":
            cmd_report(args.records, args.group_by, args.csv)
            return EXIT_OK
        config = load_config(args.config, overrides)
        if args.command == "train":
            cmd_train(config, force=args.force, show_progress=args.progress)
        elif args.command == "explain":
            cmd_explain(config, args.case)
        elif args.command == "experiment":
            cmd_experiment(config, args.n_cases, show_progress=args.progress)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.case_dir)
    except (
        SchemaError,
        RowValidationError,
        PreconditionError,
        LlmError,
        StageError,
        ValueError,
        FileNotFoundError,
        jsonschema.exceptions.ValidationError,
        requests.exceptions.RequestException,
    ) as err:
        logger.error(str(err))
        return exit_code(err)
    return EXIT_OK
