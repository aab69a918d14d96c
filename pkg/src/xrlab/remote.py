"""Chat-completions client with retries, wire-level forced exit, and a stub.

The client POSTs to {base}/v1/chat/completions with a canonical JSON body
(sorted keys, compact separators) containing exactly: model, messages,
temperature, max_tokens, and optionally stop. Timeouts and 5xx responses are
retried with exponential backoff; other non-2xx statuses fail immediately.

Forced exit is realized in two phases: cap the first request at the think
budget; if it ran out without closing its reasoning, append </think> to the
assistant text and continue with an assistant-prefix message capped at the
answer budget.

The bundled StubServer speaks the same wire format and is scriptable by a
JSON scenario (a sequence of {status, body, delay} steps) for conformance
tests; it records raw request bodies and the observed in-flight high-water
mark.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import requests

from .errors import ConfigError, EndpointError, ProtocolError
from .genctl import FORCED_EXIT, GenConfig, HARD_CAP, NATURAL_EOS
from .tokens import END_THINK


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    auth_env: str | None = None
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.5
    max_in_flight: int = 4

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    finish_reason: str | None


def request_body(
    cfg: EndpointConfig,
    messages: list[dict],
    temperature: float,
    max_tokens: int,
    stop: list[str] | None = None,
) -> bytes:
    """Canonical JSON request body; byte-stable for a given input."""
    body = {
        "model": cfg.model,
        "messages": messages,
        "temperature": temperature,
        "max_tokens": max_tokens,
    }
    if stop is not None:
        body["stop"] = list(stop)
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def complete(
    cfg: EndpointConfig,
    messages: list[dict],
    *,
    temperature: float,
    max_tokens: int,
    stop: list[str] | None = None,
) -> CompletionResult:
    """One chat completion; returns the first choice's content and finish_reason."""
    if not messages:
        raise EndpointError("messages must be non-empty")
    url = cfg.base_url.rstrip("/") + "/v1/chat/completions"
    data = request_body(cfg, messages, temperature, max_tokens, stop)
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(cfg.auth_env) if cfg.auth_env else None
    if token:
        headers["Authorization"] = f"Bearer {token}"

    last_error: str = ""
    last_body: str | None = None
    for attempt in range(cfg.max_retries + 1):
        try:
            resp = requests.post(url, data=data, headers=headers, timeout=cfg.timeout)
        except (requests.Timeout, requests.ConnectionError) as e:
            last_error = f"transport error: {e}"
        else:
            if 200 <= resp.status_code < 300:
                return _parse_completion(resp.text)
            last_error = f"HTTP {resp.status_code}"
            last_body = resp.text
            if resp.status_code < 500:
                raise EndpointError(
                    f"endpoint returned {resp.status_code}", body=last_body
                )
        if attempt < cfg.max_retries:
            time.sleep(cfg.backoff_base * (2**attempt))
    raise EndpointError(
        f"endpoint failed after {cfg.max_retries} retries: {last_error}", body=last_body
    )


def _parse_completion(raw: str) -> CompletionResult:
    try:
        payload = json.loads(raw)
        choice = payload["choices"][0]
        text = choice["message"]["content"]
        if not isinstance(text, str):
            raise TypeError("content is not a string")
        return CompletionResult(text=text, finish_reason=choice.get("finish_reason"))
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise ProtocolError(f"malformed completion response: {e}", body=raw) from e


@dataclass(frozen=True)
class RemoteGeneration:
    text: str
    termination: str
    injected_position: int | None = None


def generate_with_forced_exit(
    cfg: EndpointConfig,
    prompt: str,
    gen_cfg: GenConfig,
    *,
    temperature: float = 1.0,
) -> RemoteGeneration:
    """Two-phase generation: think-budget request, then </think> continuation.

    Phase 2 only fires when phase 1 hit its token cap without closing the
    reasoning block; its continuation is sent as an assistant-prefix message.
    """
    user = {"role": "user", "content": prompt}
    first = complete(
        cfg, [user], temperature=temperature, max_tokens=gen_cfg.think_budget
    )
    if first.finish_reason != "length":
        return RemoteGeneration(text=first.text, termination=NATURAL_EOS)
    if END_THINK in first.text:
        return RemoteGeneration(text=first.text, termination=HARD_CAP)
    prefix = first.text + END_THINK
    second = complete(
        cfg,
        [user, {"role": "assistant", "content": prefix}],
        temperature=temperature,
        max_tokens=gen_cfg.answer_budget,
    )
    return RemoteGeneration(
        text=prefix + second.text,
        termination=FORCED_EXIT,
        injected_position=len(first.text),
    )


class RemoteSource:
    """AnswerSource over an endpoint, using wire-level forced exit."""

    def __init__(self, cfg: EndpointConfig, gen_cfg: GenConfig):
        self.cfg = cfg
        self.gen_cfg = gen_cfg

    def respond(self, example, prompt, *, temperature, max_tokens, seed):
        from .evaluation import SourceResponse

        gen = generate_with_forced_exit(
            self.cfg, prompt, self.gen_cfg, temperature=temperature
        )
        return SourceResponse(text=gen.text, termination=gen.termination)


def completion_body(text: str, finish_reason: str = "stop") -> dict:
    """Standard chat-completion response payload for stubs and tests."""
    return {
        "choices": [
            {"message": {"role": "assistant", "content": text}, "finish_reason": finish_reason}
        ]
    }


@dataclass
class RecordedRequest:
    path: str
    raw: bytes
    json: dict


class StubServer:
    """Scriptable in-process chat-completions stub.

    The scenario is a list of {status, body, delay} steps consumed in request
    arrival order; body may be a dict (sent as JSON) or a raw string. When
    the scenario runs dry the server answers 500. A callable scenario
    receives (request_json, index) and returns (status, body, delay).
    """

    def __init__(self, scenario, host: str = "127.0.0.1", port: int = 0):
        self._scenario = scenario
        self._lock = threading.Lock()
        self._count = 0
        self._in_flight = 0
        self.max_in_flight = 0
        self.requests: list[RecordedRequest] = []

        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                with stub._lock:
                    stub._in_flight += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub._in_flight)
                    index = stub._count
                    stub._count += 1
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    raw = self.rfile.read(length)
                    try:
                        parsed = json.loads(raw)
                    except ValueError:
                        parsed = {}
                    with stub._lock:
                        stub.requests.append(
                            RecordedRequest(path=self.path, raw=raw, json=parsed)
                        )
                    status, body, delay = stub._step(parsed, index)
                    if delay:
                        time.sleep(delay)
                    payload = (
                        body.encode("utf-8")
                        if isinstance(body, str)
                        else json.dumps(body).encode("utf-8")
                    )
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                finally:
                    with stub._lock:
                        stub._in_flight -= 1

            def log_message(self, fmt, *args):
                pass

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def _step(self, parsed: dict, index: int) -> tuple[int, object, float]:
        if callable(self._scenario):
            return self._scenario(parsed, index)
        if index >= len(self._scenario):
            return 500, {"error": "scenario exhausted"}, 0.0
        step = self._scenario[index]
        return step.get("status", 200), step.get("body", ""), step.get("delay", 0.0)

    @classmethod
    def from_scenario_file(cls, path, **kwargs) -> "StubServer":
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f), **kwargs)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
