import json
from unittest import mock

from cfx_python.explain.constants import STAGES

from ..test_recourse.util import worked_example


def worked_answers():
    return dict(worked_example()["answers"])


def worked_cfset():
    example = worked_example()
    return {
        "original": example["original"],
        "counterfactuals": example["counterfactuals"],
        "distances": [0.0] * len(example["counterfactuals"]),
        "diversity": 0.0,
        "changed_features": [[] for _ in example["counterfactuals"]],
        "desired": "1",
        "complete": True,
    }


class StageBackend:
    """
    Backend stub answering by stage

    An answer given as a list is consumed one item per request (for retry tests).
    """

    def __init__(self, answers):
        self.answers = {stage: list(a) if isinstance(a, list) else a for stage, a in answers.items()}
        self.requests = []

    def complete(self, request):
        self.requests.append(request)
        answer = self.answers[request["stage"]]
        if isinstance(answer, list):
            answer = answer.pop(0)
        if isinstance(answer, Exception):
            raise answer
        return {"text": answer, "usage": {}, "backend_id": "stub"}

    def stages(self):
        return [request["stage"] for request in self.requests]


def stage_of(user_text):
    """Recover the pipeline stage from the text of a rendered prompt."""
    if "was provided to several systems" in user_text:
        return STAGES.TOT_MERGE
    if "provide an example that would be in the positive class" in user_text:
        return STAGES.FINAL_EXAMPLE
    if "Check the number of rules followed" in user_text:
        return STAGES.EVAL_TABLE
    if "your task is to extract the most important observed rules" in user_text:
        return STAGES.EXTRACT_CAUSES
    return STAGES.EXPLANATION


def chat_response(content, status_code=200):
    return mock.MagicMock(
        status_code=status_code,
        json=lambda: {
            "model": "stub-model",
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 5},
        },
        raise_for_status=lambda: None,
    )


class ChatServer:
    """
    Stands in for requests.Session.request, answering each chat request by its stage

    An answer given as a list is consumed one item per request; its last item then repeats.
    """

    def __init__(self, answers=None):
        answers = answers or worked_answers()
        self.answers = {stage: list(a) if isinstance(a, list) else a for stage, a in answers.items()}
        self.calls = []

    def __call__(self, session, method, url, **kwargs):
        body = json.loads(kwargs["data"])
        self.calls.append({"method": method, "url": url, "body": body, "headers": kwargs["headers"]})
        answer = self.answers[stage_of(body["messages"][-1]["content"])]
        if isinstance(answer, list):
            answer = answer.pop(0) if len(answer) > 1 else answer[0]
        return chat_response(answer)

    def patch(self):
        server = self

        def request(session, method, url, **kwargs):
            return server(session, method, url, **kwargs)

        return mock.patch("cfx_python.explain.connection.requests.Session.request", request)
