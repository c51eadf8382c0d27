"""Chat-completion client, cassette record/replay, and LLM-backed pipeline parts.

The wire format is the common chat-completion JSON shape: a POST of
``{model, messages, max_tokens, temperature}`` answered by
``{choices: [{message: {content}}], usage: {prompt_tokens, completion_tokens}}``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .core import Decomposition, Review, StepOutput, Subtask, TaskRecord
from .errors import (
    AuthError,
    BackendError,
    CassetteMiss,
    CorruptCassette,
    MalformedResponse,
    RateLimited,
    TimeoutExhausted,
)
from .pool import ModelSpec, Usage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    max_tokens: int = 512
    temperature: float = 0.0
    seed: int | None = None
    logprobs: bool = False

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a request needs at least one message")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        object.__setattr__(self, "messages", tuple((str(r), str(c)) for r, c in self.messages))

    def to_json(self) -> dict:
        doc = {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        }
        if self.seed is not None:
            doc["seed"] = self.seed
        if self.logprobs:
            doc["logprobs"] = True
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "CompletionRequest":
        return cls(
            doc["model"],
            tuple((m["role"], m["content"]) for m in doc["messages"]),
            int(doc["max_tokens"]),
            float(doc["temperature"]),
            doc.get("seed"),
            bool(doc.get("logprobs", False)),
        )

    def digest(self) -> str:
        """Hash of model, messages, max_tokens and temperature."""
        key = json.dumps(
            [self.model, [list(m) for m in self.messages], self.max_tokens, float(self.temperature)],
            separators=(",", ":"), ensure_ascii=False,
        )
        return hashlib.sha256(key.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CompletionResponse:
    content: str
    prompt_tokens: int
    completion_tokens: int
    model: str
    latency_ms: float = 0.0
    token_logprobs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise MalformedResponse("negative token usage")

    @property
    def usage(self) -> Usage:
        return Usage(self.prompt_tokens, self.completion_tokens)

    def to_json(self) -> dict:
        doc = {
            "content": self.content,
            "usage": {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens},
            "model": self.model,
            "latency_ms": self.latency_ms,
        }
        if self.token_logprobs:
            doc["token_logprobs"] = list(self.token_logprobs)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "CompletionResponse":
        return cls(
            doc["content"],
            int(doc["usage"]["prompt_tokens"]),
            int(doc["usage"]["completion_tokens"]),
            doc.get("model", ""),
            float(doc.get("latency_ms", 0.0)),
            tuple(float(v) for v in doc.get("token_logprobs", ())),
        )


def parse_completion(body: dict, latency_ms: float = 0.0) -> CompletionResponse:
    """Read a chat-completion response body; raise MalformedResponse on bad shapes."""
    try:
        choice = body["choices"][0]
        content = choice["message"]["content"]
        usage = body["usage"]
        prompt, completion = int(usage["prompt_tokens"]), int(usage["completion_tokens"])
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise MalformedResponse(f"unexpected response shape: {exc!r}") from exc
    if not isinstance(content, str):
        raise MalformedResponse("message content is not a string")
    logprobs = ()
    lp = choice.get("logprobs")
    if isinstance(lp, dict) and isinstance(lp.get("content"), list):
        try:
            logprobs = tuple(float(t["logprob"]) for t in lp["content"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad logprobs: {exc!r}") from exc
    return CompletionResponse(content, prompt, completion, str(body.get("model", "")), latency_ms, logprobs)


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 4
    base_delay_s: float = 0.5
    max_delay_s: float = 8.0
    timeout_s: float = 60.0

    def delay(self, attempt: int) -> float:
        return min(self.max_delay_s, self.base_delay_s * 2 ** attempt)


def _url(endpoint: str) -> str:
    endpoint = endpoint.rstrip("/")
    return endpoint if endpoint.endswith("/chat/completions") else endpoint + "/chat/completions"


def chat_complete(
    endpoint: str,
    auth: str | None,
    req: CompletionRequest,
    retry_policy: RetryPolicy | None = None,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResponse:
    """POST one request, retrying 429, 5xx and transport errors with exponential backoff.

    401/403 fail at once. Reported latency covers every attempt and backoff.
    """
    policy = retry_policy or RetryPolicy()
    own = client is None
    client = client or httpx.Client(timeout=policy.timeout_s)
    headers = {"Authorization": f"Bearer {auth}"} if auth else {}
    start = time.perf_counter()
    slept = 0.0  # nominal backoff
    slept_wall = 0.0
    last = ""
    rate_limited = False
    try:
        for attempt in range(policy.max_retries + 1):
            try:
                resp = client.post(_url(endpoint), json=req.to_json(), headers=headers)
            except httpx.TimeoutException as exc:
                last, rate_limited = f"timeout: {exc}", False
            except httpx.TransportError as exc:
                last, rate_limited = f"transport error: {exc}", False
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"{endpoint}: HTTP {resp.status_code}")
                if resp.status_code == 429 or resp.status_code >= 500:
                    last, rate_limited = f"HTTP {resp.status_code}", resp.status_code == 429
                elif resp.status_code >= 400:
                    raise BackendError(f"{endpoint}: HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        body = resp.json()
                    except ValueError as exc:
                        raise MalformedResponse(f"{endpoint}: body is not JSON") from exc
                    # request time plus nominal backoff, whether or not sleep blocked
                    active = time.perf_counter() - start - slept_wall
                    return parse_completion(body, (active + slept) * 1000.0)
            if attempt < policy.max_retries:
                wait = policy.delay(attempt)
                log.info("%s: %s, retrying in %.2fs", endpoint, last, wait)
                t0 = time.perf_counter()
                sleep(wait)
                slept_wall += time.perf_counter() - t0
                slept += wait
    finally:
        if own:
            client.close()
    if rate_limited:
        raise RateLimited(f"{endpoint}: still rate limited after {policy.max_retries} retries")
    raise TimeoutExhausted(f"{endpoint}: {last} after {policy.max_retries} retries")


# -- completers: where responses come from ----------------------------------


class Completer(Protocol):
    def complete(self, model: ModelSpec, req: CompletionRequest) -> CompletionResponse: ...


class HttpCompleter:
    """Live client; shareable across threads, with a per-endpoint concurrency cap."""

    def __init__(self, endpoint: str | None = None, retry_policy: RetryPolicy | None = None,
                 max_concurrency: int = 8, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.retry_policy = retry_policy or RetryPolicy()
        self.max_concurrency = max_concurrency
        self.client = httpx.Client(timeout=self.retry_policy.timeout_s, transport=transport)
        self.sleep = sleep
        self._gates: dict[str, threading.Semaphore] = {}
        self._lock = threading.Lock()

    def _gate(self, endpoint: str) -> threading.Semaphore:
        with self._lock:
            if endpoint not in self._gates:
                self._gates[endpoint] = threading.Semaphore(self.max_concurrency)
            return self._gates[endpoint]

    def complete(self, model, req):
        endpoint = self.endpoint or model.endpoint
        if not endpoint:
            raise BackendError(f"no endpoint configured for {model.name}")
        auth = os.environ.get(model.api_key_env) if model.api_key_env else None
        if model.api_key_env and not auth:
            raise AuthError(f"environment variable {model.api_key_env} is not set")
        with self._gate(endpoint):
            return chat_complete(endpoint, auth, req, self.retry_policy, self.client, self.sleep)

    def close(self):
        self.client.close()


class Cassette:
    """Recorded exchanges, one JSON object ``{digest, request, response}`` per line."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: dict[str, CompletionResponse] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    req = CompletionRequest.from_json(doc["request"])
                    resp = CompletionResponse.from_json(doc["response"])
                    digest = doc["digest"]
                except (ValueError, KeyError, TypeError, BackendError) as exc:
                    raise CorruptCassette(f"{self.path}:{n}: {exc}") from exc
                if digest != req.digest():
                    raise CorruptCassette(f"{self.path}:{n}: digest does not match request")
                self.entries[digest] = resp

    def __len__(self):
        return len(self.entries)

    def lookup(self, req: CompletionRequest) -> CompletionResponse:
        try:
            return self.entries[req.digest()]
        except KeyError:
            raise CassetteMiss(f"no recorded response for request {req.digest()[:12]}") from None

    def add(self, req: CompletionRequest, resp: CompletionResponse) -> None:
        digest = req.digest()
        with self._lock:
            if digest in self.entries:
                return
            self.entries[digest] = resp
            if self.path is not None:
                line = json.dumps({"digest": digest, "request": req.to_json(), "response": resp.to_json()},
                                  sort_keys=True, ensure_ascii=False)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


class ReplayCompleter:
    """Answers only from a cassette; never touches the network."""

    def __init__(self, cassette: Cassette):
        self.cassette = cassette

    def complete(self, model, req):
        return self.cassette.lookup(req)


class RecordingCompleter:
    def __init__(self, inner: Completer, cassette: Cassette):
        self.inner, self.cassette = inner, cassette

    def complete(self, model, req):
        resp = self.inner.complete(model, req)
        self.cassette.add(req, resp)
        return resp


# -- prompts and LLM-backed pipeline parts -----------------------------------


@dataclass(frozen=True)
class Prompts:
    """Prompt templates; fields are ``str.format`` templates."""

    step_system: str = "Solve the given subtask of a larger problem. Reply with the result only."
    step_user: str = "Problem: {task}\n{history}Subtask: {subtask}"
    review_user: str = (
        "Problem: {task}\nSubtask: {subtask}\nProposed result: {result}\n"
        "If the result is correct reply ACCEPT. Otherwise reply with the corrected result only."
    )
    decompose_user: str = (
        "Break the following problem into a short ordered list of subtasks, one per line, "
        "numbered 1., 2., ...\nProblem: {task}"
    )
    judge_user: str = (
        "Problem: {task}\nStep A: {first}\nStep B: {second}\n"
        "Are these two consecutive steps unrelated to each other? Reply YES or NO."
    )


def _history_block(history: list[str]) -> str:
    if not history:
        return ""
    return "".join(f"Result of step {i + 1}: {h}\n" for i, h in enumerate(history))


class LlmExecutor:
    """Runs each subtask as one chat completion on the assigned model."""

    def __init__(self, completer: Completer, prompts: Prompts = Prompts(), max_tokens: int = 512,
                 temperature: float = 0.0):
        self.completer = completer
        self.prompts = prompts
        self.max_tokens, self.temperature = max_tokens, temperature

    def step_request(self, task, subtask, model, history) -> CompletionRequest:
        user = self.prompts.step_user.format(task=task.text, history=_history_block(history),
                                             subtask=subtask.text)
        return CompletionRequest(model.name, (("system", self.prompts.step_system), ("user", user)),
                                 self.max_tokens, self.temperature)

    def run_step(self, task, subtask, model, history, seed):
        resp = self.completer.complete(model, self.step_request(task, subtask, model, history))
        return StepOutput(resp.content.strip(), resp.usage, None, resp.latency_ms)


class LlmReviewer:
    def __init__(self, completer: Completer, prompts: Prompts = Prompts(), max_tokens: int = 512):
        self.completer, self.prompts, self.max_tokens = completer, prompts, max_tokens

    def review(self, task, subtask, result, strong_model, history, seed):
        user = self.prompts.review_user.format(task=task.text, subtask=subtask.text, result=result.content)
        resp = self.completer.complete(
            strong_model, CompletionRequest(strong_model.name, (("user", user),), self.max_tokens, 0.0)
        )
        text = resp.content.strip()
        if text.upper().startswith("ACCEPT"):
            return Review(True, None, resp.usage, resp.latency_ms)
        return Review(False, StepOutput(text, result.usage, None, result.latency_ms), resp.usage,
                      resp.latency_ms)


_NUMBERED = re.compile(r"^\s*(?:\d+[.)]|[-*])\s*(.+?)\s*$")


def parse_subtask_list(text: str) -> list[str]:
    items = [m.group(1) for m in map(_NUMBERED.match, text.splitlines()) if m]
    if not items:
        items = [ln.strip() for ln in text.splitlines() if ln.strip()]
    return items


class LlmDecompositionGenerator:
    """Samples ``m`` decompositions from one model at a non-zero temperature."""

    def __init__(self, completer: Completer, model: ModelSpec, prompts: Prompts = Prompts(),
                 temperature: float = 0.7, max_tokens: int = 512):
        self.completer, self.model, self.prompts = completer, model, prompts
        self.temperature, self.max_tokens = temperature, max_tokens

    def generate(self, task, m, seed):
        out = []
        for i in range(m):
            user = self.prompts.decompose_user.format(task=task.text)
            # a sample tag keeps the m requests distinct for replay
            msgs = (("system", f"sample {i}"), ("user", user))
            resp = self.completer.complete(
                self.model, CompletionRequest(self.model.name, msgs, self.max_tokens, self.temperature, seed + i)
            )
            items = parse_subtask_list(resp.content)
            if items:
                out.append(Decomposition(task.task_id, [Subtask(j, t) for j, t in enumerate(items)], strategy=i))
        return out


class LlmJudge:
    def __init__(self, completer: Completer, model: ModelSpec, prompts: Prompts = Prompts()):
        self.completer, self.model, self.prompts = completer, model, prompts

    def unrelated(self, task_text, first, second):
        user = self.prompts.judge_user.format(task=task_text, first=first, second=second)
        resp = self.completer.complete(self.model, CompletionRequest(self.model.name, (("user", user),), 8, 0.0))
        return resp.content.strip().upper().startswith("Y")


class LlmTokenProbSource:
    """Per-token probabilities of a probe model's answer to the subtask."""

    def __init__(self, completer: Completer, model: ModelSpec, prompts: Prompts = Prompts(),
                 max_tokens: int = 256):
        self.completer, self.model, self.prompts, self.max_tokens = completer, model, prompts, max_tokens

    def token_probs(self, task, subtask, seed):
        user = self.prompts.step_user.format(task=task.text, history="", subtask=subtask.text)
        req = CompletionRequest(self.model.name, (("system", self.prompts.step_system), ("user", user)),
                                self.max_tokens, 0.0, logprobs=True)
        resp = self.completer.complete(self.model, req)
        if not resp.token_logprobs:
            raise MalformedResponse("probe response carried no token log-probabilities")
        return [min(1.0, math.exp(lp)) for lp in resp.token_logprobs]


def replay_executor(cassette: str | Path | Cassette, prompts: Prompts = Prompts()) -> LlmExecutor:
    """Executor that answers from recorded exchanges only."""
    if not isinstance(cassette, Cassette):
        path = Path(cassette)
        if not path.exists():
            raise CorruptCassette(f"cassette {path} does not exist")
        cassette = Cassette(path)
    return LlmExecutor(ReplayCompleter(cassette), prompts)
