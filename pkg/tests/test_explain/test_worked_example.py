"""
End to end closed loop on the bundled worked example

The chat endpoint is stubbed while recording a transcript; the replayed run must then reproduce
every stage without network access.
"""

import os
import pytest

from cfx_python.explain.connection import Backend, ChatConnection, Transcript
from cfx_python.explain.evalloop import aggregate, evaluate_case, format_report
from cfx_python.explain.pipeline import explanation_context, extract_causes, generate_explanation
from cfx_python.explain.util import ReplayMiss
from cfx_python.recourse.tabular import Dataset

from ..test_recourse.util import DATA_DIR, adult_schema, worked_example_classifier
from .util import ChatServer, worked_cfset

GOLDEN_DIR = os.path.join(DATA_DIR, "golden")


def run_worked_example(backend, case_dir, eval_table="llm"):
    schema = adult_schema()
    cfs = worked_cfset()
    original = cfs["original"]
    rules = extract_causes(backend, original, cfs, schema)
    explanation = generate_explanation(
        backend, explanation_context(schema, original, cfs, rules, "zero_shot")
    )
    case = {
        "case_id": 0,
        "original": original,
        "cfs": cfs,
        "rules": rules,
        "explanation": explanation,
        "transcripts": {},
        "strategy": "zero_shot",
        "k": 5,
        "seed": 0,
        "branches": [],
    }
    reference = Dataset(schema, [original] + cfs["counterfactuals"])
    record = evaluate_case(
        backend, worked_example_classifier(schema), reference, case, case_dir, eval_table=eval_table
    )
    return case, record


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture
def transcript_path(tmp_path):
    path = str(tmp_path / "transcript.jsonl")
    with ChatServer().patch():
        backend = Backend("record", Transcript(path), ChatConnection("test-key"))
        run_worked_example(backend, str(tmp_path / "recorded"))
    return path


class TestWorkedExample:
    def test_recorded_stages(self, transcript_path):
        transcript = Transcript(transcript_path)
        stages = sorted(entry["stage"] for entry in transcript.entries.values())
        assert stages == ["eval_table", "explanation", "extract_causes", "final_example"]

    def test_replay(self, transcript_path, tmp_path):
        backend = Backend.from_config("replay", transcript_path, env={})
        case_dir = str(tmp_path / "replayed")
        case, record = run_worked_example(backend, case_dir)

        assert [rule["importance"] for rule in case["rules"]] == [3, 1, 1, 1, 0]
        assert case["explanation"].startswith(
            "Based on the analysis of your current situation and the observed patterns in the data"
        )
        assert record["final_example"] == {
            "age": 41,
            "workclass": "Self-Employed",
            "education": "Bachelors",
            "status": "Married",
            "occupation": "Professional",
            "race": "White",
            "gender": "Male",
            "hpw": 30,
        }
        assert record["validity"] is True
        assert record["causes_identified"] == 5
        assert record["causes_used"] == 4
        assert record["top_used"] == [True, False, True]
        assert record["in_data"] is False

        for name in ["temp_csv.csv", "evaluation.csv"]:
            assert read(os.path.join(case_dir, name)) == read(os.path.join(GOLDEN_DIR, name))

    def test_replay_matches_recording(self, transcript_path, tmp_path):
        backend = Backend.from_config("replay", transcript_path, env={})
        run_worked_example(backend, str(tmp_path / "replayed"))
        for name in ["temp_csv.csv", "evaluation.csv"]:
            assert read(os.path.join(tmp_path, "replayed", name)) == read(
                os.path.join(tmp_path, "recorded", name)
            )

    def test_native_table(self, transcript_path, tmp_path):
        backend = Backend.from_config("replay", transcript_path, env={})
        _, record = run_worked_example(backend, str(tmp_path / "native"), eval_table="native")
        assert record["causes_used"] == 3
        assert record["top_used"] == [True, False, True]

    def test_metrics(self, transcript_path):
        backend = Backend.from_config("replay", transcript_path, env={})
        _, record = run_worked_example(backend, None)
        (report,) = aggregate([record])
        assert report["validity_pct"] == 100.0
        assert report["mean_causes_identified"] == 5.0
        assert report["causes_used_pct"] == pytest.approx(80.0)
        assert report["first_cause_used_pct"] == 100.0
        assert report["second_cause_used_pct"] == 0.0
        assert report["third_cause_used_pct"] == 100.0
        assert report["in_data_pct"] == 0.0
        assert "80%" in format_report([report])

    def test_changed_prompt_misses(self, transcript_path, tmp_path):
        backend = Backend.from_config("replay", transcript_path, env={})
        cfs = worked_cfset()
        cfs["counterfactuals"] = cfs["counterfactuals"][:4]
        with pytest.raises(ReplayMiss):
            extract_causes(backend, cfs["original"], cfs, adult_schema())
