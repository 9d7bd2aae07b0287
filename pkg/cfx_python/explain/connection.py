"""
Chat-completion backend: an OpenAI-compatible HTTP connection plus a record/replay transcript
"""

from __future__ import annotations

import requests
from requests.adapters import HTTPAdapter

import json
import os
import threading
import time
from datetime import datetime
from typing import Dict, Mapping, Optional
from urllib3.util.retry import Retry

from cfx_python.types import ChatRequest, Completion, TranscriptEntry

from .constants import (
    API_KEY_ENV,
    BASE_URL_ENV,
    CHAT_ENDPOINT,
    DEFAULT_BASE_URL,
    DEFAULT_MAX_IN_FLIGHT,
    DEFAULT_MODEL,
    DEFAULT_TIMEOUT,
    LLM_MODES,
    MODEL_ENV,
    RETRY_BACKOFF,
    RETRY_STATUSES,
    RETRY_TOTAL,
    STAGES,
)
from .util import LlmConfigError, LlmError, ReplayMiss, hash_key, logger

CANONICAL_FIELDS = ["stage", "system_text", "user_text", "temperature", "max_tokens"]


def canonical_request(request: ChatRequest) -> Dict:
    return {field: request[field] for field in CANONICAL_FIELDS}  # type: ignore


def canonical_key(request: ChatRequest) -> str:
    """Content hash of the request fields that affect the completion (metadata ignored)."""
    return hash_key(canonical_request(request))


def join_url(base_url: str, *parts: str) -> str:
    """Endpoint URL with exactly one slash between the base and each path part."""
    segments = [part.strip("/") for part in parts if part.strip("/")]
    return "/".join([base_url.rstrip("/")] + segments)


class Transcript:
    """Append-only JSONL store of completions keyed by request hash; appends are serialized."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.entries: Dict[str, TranscriptEntry] = {}
        self._lock = threading.Lock()
        if path and os.path.exists(path):
            self.load()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as fh:  # type: ignore
            for line_number, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    key = entry["key"]
                except (json.JSONDecodeError, KeyError, TypeError) as err:
                    raise ValueError(f"malformed transcript line {line_number} in {self.path}: {err}")
                self.entries.setdefault(key, entry)
        logger.debug(f"loaded {len(self.entries)} transcript entries from {self.path}")

    def get(self, key: str) -> Optional[TranscriptEntry]:
        return self.entries.get(key)

    def append(self, request: ChatRequest, response: str) -> TranscriptEntry:
        key = canonical_key(request)
        entry: TranscriptEntry = {
            "key": key,
            "stage": request["stage"],
            "system": request["system_text"],
            "user": request["user_text"],
            "temperature": request["temperature"],
            "max_tokens": request["max_tokens"],
            "response": response,
            "ts": datetime.now().isoformat(timespec="seconds"),
        }
        with self._lock:
            if key in self.entries:
                return self.entries[key]
            self.entries[key] = entry
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry) + "\n")
        return entry


class ChatConnection:
    """OpenAI-compatible chat completion endpoint."""

    def __init__(
        self,
        api_key: str,
        url: str = DEFAULT_BASE_URL,
        model: str = DEFAULT_MODEL,
        timeout: float = DEFAULT_TIMEOUT,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
    ):
        self.http = requests.Session()
        retries = Retry(
            total=RETRY_TOTAL,
            backoff_factor=RETRY_BACKOFF,
            status_forcelist=RETRY_STATUSES,
            allowed_methods=frozenset(["POST"]),
            raise_on_status=False,
        )
        self.http.mount("https://", HTTPAdapter(max_retries=retries))
        self.http.mount("http://", HTTPAdapter(max_retries=retries))
        self.url = url
        self.model = model
        self.timeout = timeout
        self.headers = {
            "Accept": "application/json",
            "Content-Type": "application/json",
            "Authorization": f"Bearer {api_key}",
        }
        self.request_count = 0
        self._count_lock = threading.Lock()
        self._in_flight = threading.BoundedSemaphore(max_in_flight)

    def post_json(self, endpoint: str, body: Dict) -> Dict:
        """
        POST a JSON body and return the decoded JSON answer

        Raises:
            requests.exceptions.HTTPError: non-2xx status once retries are spent; the message carries
                the server's error message when the body has one
        """
        url = join_url(self.url, endpoint)
        started = time.perf_counter()
        with self._count_lock:
            self.request_count += 1
        with self._in_flight:
            resp = self.http.request(
                "POST", url, headers=self.headers, timeout=self.timeout, data=json.dumps(body)
            )
        elapsed = int((time.perf_counter() - started) * 1000)
        logger.debug(f"POST /{endpoint} - {resp.status_code} - {elapsed} ms")

        try:
            resp.raise_for_status()
        except requests.exceptions.HTTPError as err:
            detail = ""
            try:
                detail = resp.json()["error"]["message"]
            except Exception:
                pass
            raise requests.exceptions.HTTPError(f"{err} {detail}".strip())
        return resp.json()

    def complete(self, request: ChatRequest) -> Completion:
        messages = []
        if request["system_text"]:
            messages.append({"role": "system", "content": request["system_text"]})
        messages.append({"role": "user", "content": request["user_text"]})
        body = self.post_json(
            CHAT_ENDPOINT,
            {
                "model": self.model,
                "messages": messages,
                "temperature": request["temperature"],
                "max_tokens": request["max_tokens"],
            },
        )
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise LlmError(f"malformed chat completion response: {json.dumps(body)[:200]}")
        usage = {k: v for k, v in (body.get("usage") or {}).items() if isinstance(v, int)}
        return {"text": text, "usage": usage, "backend_id": body.get("model", self.model)}


def check_request(request: ChatRequest) -> None:
    if request["stage"] not in STAGES.values():
        raise ValueError(f"unknown stage ({request['stage']})")
    if not request["user_text"]:
        raise ValueError("chat request must have a non-empty user text")
    if request["temperature"] < 0:
        raise ValueError(f"temperature must be nonnegative ({request['temperature']})")


class Backend:
    """
    Completion source for every pipeline stage

    live: call the endpoint. record: serve from the transcript when the request was already
    recorded, otherwise call the endpoint and append. replay: serve from the transcript only.
    """

    def __init__(
        self,
        mode: str,
        transcript: Optional[Transcript] = None,
        connection: Optional[ChatConnection] = None,
    ):
        if mode not in LLM_MODES.values():
            raise LlmConfigError(f"unknown llm mode ({mode})")
        if mode in (LLM_MODES.REPLAY, LLM_MODES.RECORD) and transcript is None:
            raise LlmConfigError(f"llm mode {mode} requires a transcript")
        if mode in (LLM_MODES.LIVE, LLM_MODES.RECORD) and connection is None:
            raise LlmConfigError(f"llm mode {mode} requires a live connection")
        self.mode = mode
        self.transcript = transcript
        self.connection = connection

    @classmethod
    def from_config(
        cls,
        mode: str,
        transcript_path: Optional[str] = None,
        timeout: float = DEFAULT_TIMEOUT,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        env: Mapping[str, str] = os.environ,
    ) -> Backend:
        """
        Build a backend, reading the credential from the environment

        Raises:
            LlmConfigError: missing credential (live/record) or transcript (record/replay)
        """
        transcript = None
        if mode in (LLM_MODES.REPLAY, LLM_MODES.RECORD):
            if not transcript_path:
                raise LlmConfigError(f"llm mode {mode} requires --transcript")
            if mode == LLM_MODES.REPLAY and not os.path.exists(transcript_path):
                raise LlmConfigError(f"missing transcript file ({transcript_path})")
            transcript = Transcript(transcript_path)

        connection = None
        if mode in (LLM_MODES.LIVE, LLM_MODES.RECORD):
            api_key = env.get(API_KEY_ENV)
            if not api_key:
                raise LlmConfigError(f"llm mode {mode} requires the {API_KEY_ENV} environment variable")
            connection = ChatConnection(
                api_key,
                url=env.get(BASE_URL_ENV) or DEFAULT_BASE_URL,
                model=env.get(MODEL_ENV) or DEFAULT_MODEL,
                timeout=timeout,
                max_in_flight=max_in_flight,
            )
        return cls(mode, transcript, connection)

    def complete(self, request: ChatRequest) -> Completion:
        check_request(request)
        key = canonical_key(request)
        if self.transcript is not None:
            entry = self.transcript.get(key)
            if entry is not None:
                logger.debug(f"{request['stage']} served from transcript ({key})")
                return {"text": entry["response"], "usage": {}, "backend_id": "transcript"}
        if self.mode == LLM_MODES.REPLAY:
            raise ReplayMiss(key, canonical_request(request))

        try:
            completion = self.connection.complete(request)  # type: ignore
        except requests.exceptions.RequestException as err:
            raise LlmError(f"{request['stage']} request failed: {err}") from err
        if self.mode == LLM_MODES.RECORD:
            self.transcript.append(request, completion["text"])  # type: ignore
        return completion


def complete(backend: Backend, request: ChatRequest) -> Completion:
    return backend.complete(request)
