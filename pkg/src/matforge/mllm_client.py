"""Client for OpenAI-compatible vision chat-completion endpoints.

The client talks to a *transport*: any callable taking the request JSON and
returning ``(status_code, body)``. Three transports ship here: HTTP (httpx),
a scripted mock, and a replay transport reading a recorded session log.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import cv2
import numpy as np

from .errors import (
    AuthError,
    MalformedResponse,
    NoValidChoice,
    RateLimited,
    TransportError,
)

log = logging.getLogger(__name__)

MAX_IMAGE_BYTES = 20 * 1024 * 1024
DEFAULT_BASE_URL = "https://api.openai.com/v1"
DEFAULT_MODEL = "gpt-4o"
BACKOFF = (1.0, 2.0, 4.0)

Transport = Callable[[dict], tuple]


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def image_part(image, mime: str = "image/png") -> dict:
    """An image part from PNG bytes or a float RGB array in [0, 1]."""
    if isinstance(image, np.ndarray):
        rgb = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
        ok, buf = cv2.imencode(".png", np.ascontiguousarray(rgb[:, :, ::-1]))
        if not ok:
            raise ValueError("could not encode image")
        image, mime = buf.tobytes(), "image/png"
    if len(image) > MAX_IMAGE_BYTES:
        raise ValueError(f"image part is {len(image)} bytes; the limit is 20 MB")
    return {"type": "image", "data": bytes(image), "mime": mime}


@dataclass
class PromptPayload:
    system: str
    turns: list
    max_tokens: int = 1024
    expect_json: bool = False
    temperature: float = 0.0

    def __post_init__(self):
        if not self.turns:
            raise ValueError("payload needs at least one user turn")
        if self.temperature != 0.0:
            raise ValueError("temperature is pinned to 0")
        for turn in self.turns:
            for part in turn:
                if part["type"] == "image" and len(part["data"]) > MAX_IMAGE_BYTES:
                    raise ValueError("image part exceeds 20 MB")

    def to_request(self, model: str) -> dict:
        messages = [{"role": "system", "content": self.system}]
        for turn in self.turns:
            content = []
            for part in turn:
                if part["type"] == "text":
                    content.append({"type": "text", "text": part["text"]})
                else:
                    b64 = base64.b64encode(part["data"]).decode("ascii")
                    content.append({"type": "image_url",
                                    "image_url": {"url": f"data:{part['mime']};base64,{b64}"}})
            messages.append({"role": "user", "content": content})
        req = {"model": model, "messages": messages, "temperature": 0,
               "max_tokens": self.max_tokens}
        if self.expect_json:
            req["response_format"] = {"type": "json_object"}
        return req


@dataclass
class MLLMResponse:
    text: str
    parsed: Any = None
    usage: dict = field(default_factory=dict)


_FENCE = re.compile(r"```(?:json|JSON)?\s*(.*?)```", re.DOTALL)


def parse_json_object(text: str):
    """Return the first JSON object in ``text`` (code fences stripped), or None."""
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    decoder = json.JSONDecoder()
    for cand in candidates:
        cand = cand.strip()
        for start in [i for i, ch in enumerate(cand) if ch == "{"]:
            try:
                value, _ = decoder.raw_decode(cand[start:])
            except json.JSONDecodeError:
                continue
            if isinstance(value, dict):
                return value
    return None


def request_hash(request: dict) -> str:
    return hashlib.sha256(json.dumps(request, sort_keys=True).encode()).hexdigest()


# -------------------------------------------------------------------- transports


class HttpTransport:
    def __init__(self, base_url: str, api_key: str, timeout: float = 120.0):
        import httpx

        self.url = base_url.rstrip("/") + "/chat/completions"
        self._client = httpx.Client(timeout=timeout,
                                    headers={"Authorization": f"Bearer {api_key}"})
        self._httpx = httpx

    def __call__(self, request: dict):
        try:
            r = self._client.post(self.url, json=request)
        except self._httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        try:
            body = r.json()
        except ValueError:
            body = r.text
        return r.status_code, body


def chat_body(text: str, usage: dict | None = None) -> dict:
    """A minimal chat-completions response body carrying ``text``."""
    return {"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
            "usage": usage or {}}


class MockTransport:
    """Scripted transport.

    ``script`` is either a callable ``request -> (status, body) | str`` or a
    sequence of such items consumed in order. A bare string means HTTP 200
    with that text as the assistant message.
    """

    def __init__(self, script):
        self._fn = script if callable(script) else None
        self._queue = deque([] if callable(script) else script)
        self.requests: list[dict] = []
        self._lock = threading.Lock()

    def __call__(self, request: dict):
        with self._lock:
            self.requests.append(request)
            if self._fn is None:
                if not self._queue:
                    raise TransportError("mock script exhausted")
                item = self._queue.popleft()
        if self._fn is not None:
            item = self._fn(request)
        if isinstance(item, str):
            return 200, chat_body(item)
        status, body = item
        if isinstance(body, str) and status == 200:
            body = chat_body(body)
        return status, body

    @property
    def calls(self) -> int:
        return len(self.requests)


class ReplayTransport:
    """Serves responses recorded in a session log, matched by request hash."""

    def __init__(self, log_path):
        self._responses = defaultdict(deque)
        self._lock = threading.Lock()
        with open(log_path) as f:
            for line in f:
                if line.strip():
                    entry = json.loads(line)
                    self._responses[entry["request_hash"]].append(
                        (entry["status"], entry["response"]))

    def __call__(self, request: dict):
        key = request_hash(request)
        with self._lock:
            queue = self._responses.get(key)
            if not queue:
                raise TransportError(f"no recorded response for request {key[:12]}")
            return queue.popleft()


# ------------------------------------------------------------------------ client


class MLLMClient:
    """Retrying, logging chat client. Safe to share between threads."""

    def __init__(self, transport: Transport, model: str = DEFAULT_MODEL, log_path=None,
                 max_in_flight: int = 2, backoff=BACKOFF, sleep=time.sleep):
        self.transport = transport
        self.model = model
        self.log_path = Path(log_path) if log_path else None
        self.backoff = tuple(backoff)
        self.sleep = sleep
        self.attempts = 0
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._log_lock = threading.Lock()

    @classmethod
    def from_env(cls, log_path=None, **kwargs) -> "MLLMClient":
        key = os.environ.get("MLLM_API_KEY")
        if not key:
            raise AuthError("MLLM_API_KEY is not set")
        base = os.environ.get("MLLM_BASE_URL", DEFAULT_BASE_URL)
        model = os.environ.get("MLLM_MODEL", DEFAULT_MODEL)
        return cls(HttpTransport(base, key), model=model, log_path=log_path, **kwargs)

    def _record(self, request, status, body, attempt):
        if self.log_path is None:
            return
        entry = {"request_hash": request_hash(request), "attempt": attempt, "status": status,
                 "request": request, "response": body}
        with self._log_lock:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    def complete(self, payload: PromptPayload) -> MLLMResponse:
        request = payload.to_request(self.model)
        with self._slots:
            for attempt in range(len(self.backoff) + 1):
                self.attempts += 1
                status, body = self.transport(request)
                self._record(request, status, body, attempt)
                if status == 200:
                    return self._parse(body)
                if status in (401, 403):
                    raise AuthError(f"HTTP {status}")
                if status == 429 or 500 <= status < 600:
                    if attempt < len(self.backoff):
                        log.warning("HTTP %d, retrying in %.0fs", status, self.backoff[attempt])
                        self.sleep(self.backoff[attempt])
                        continue
                    if status == 429:
                        raise RateLimited(f"still rate limited after {attempt + 1} attempts")
                    raise TransportError(f"HTTP {status} after {attempt + 1} attempts")
                raise TransportError(f"unexpected HTTP {status}")
        raise AssertionError("unreachable")

    @staticmethod
    def _parse(body) -> MLLMResponse:
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse(f"no message content in response: {body!r:.200}") from None
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        if not isinstance(content, str):
            raise MalformedResponse("message content is not text")
        usage = body.get("usage") or {}
        return MLLMResponse(text=content, parsed=parse_json_object(content), usage=usage)


def extract_choice(resp: MLLMResponse, valid) -> str:
    """Pick the answer out of ``resp``: the JSON ``choice`` field, else the one
    valid option mentioned in the text. Matching ignores case."""
    valid = list(valid)
    if not valid:
        raise ValueError("valid choices must be non-empty")
    lowered = {v.lower(): v for v in valid}
    parsed = resp.parsed if isinstance(resp.parsed, dict) else None
    if parsed is not None and "choice" in parsed:
        picked = str(parsed["choice"]).strip().lower()
        if picked in lowered:
            return lowered[picked]
        raise NoValidChoice(f"choice {parsed['choice']!r} is not one of {valid}")
    hits = [v for v in valid
            if re.search(rf"(?<![\w]){re.escape(v)}(?![\w])", resp.text, re.IGNORECASE)]
    if len(hits) != 1:
        raise NoValidChoice(f"{len(hits)} candidate(s) named in response")
    return hits[0]
