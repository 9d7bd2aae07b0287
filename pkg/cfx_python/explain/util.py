import hashlib
import json
import logging
from typing import Dict

# name the logger after the package to make it simple to disable for packages using this one as a dependency
logger = logging.getLogger("explain")
LOG_LEVELS = {
    "info": logging.INFO,
    "debug": logging.DEBUG,
    "warn": logging.WARN,
    "error": logging.ERROR,
}


def hash_key(content: Dict) -> str:
    body = json.dumps(content, sort_keys=True)
    hash_code = hashlib.md5(body.encode("utf-8")).hexdigest()
    return hash_code


class LlmError(Exception):
    pass


class LlmConfigError(LlmError):
    """The backend is missing a credential, endpoint or transcript it needs for its mode."""


class ReplayMiss(LlmError):
    def __init__(self, key: str, request: Dict):
        self.key = key
        self.request = request
        super().__init__(
            f"no recorded completion for request {key} (stage={request.get('stage')}): "
            + json.dumps(request, sort_keys=True)
        )


class NoRulesError(LlmError):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
