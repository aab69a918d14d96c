from __future__ import annotations

import json
import os

import pytest

from xrlab.errors import EndpointError, ProtocolError
from xrlab.evaluation import EvalRunConfig, evaluate, TranscriptSource
from xrlab.genctl import GenConfig
from xrlab.remote import (
    EndpointConfig,
    RemoteSource,
    StubServer,
    complete,
    completion_body,
    generate_with_forced_exit,
    request_body,
)
from xrlab.tasks import gen_arithmetic


def _cfg(server, **kwargs):
    defaults = dict(
        base_url=server.base_url, model="stub-model", timeout=5.0,
        max_retries=3, backoff_base=0.01, max_in_flight=4,
    )
    defaults.update(kwargs)
    return EndpointConfig(**defaults)


def _gen_cfg(think=8, answer=4):
    return GenConfig(max_response_tokens=64, think_budget=think, answer_budget=answer)


def test_echo_stub_roundtrip():
    canned = "<think>two</think><answer>2</answer>"
    with StubServer([{"status": 200, "body": completion_body(canned)}]) as server:
        result = complete(
            _cfg(server), [{"role": "user", "content": "1+1?"}],
            temperature=0.0, max_tokens=32,
        )
    assert result.text == canned
    assert result.finish_reason == "stop"


def test_request_body_schema_and_bytes():
    cfg = EndpointConfig(base_url="http://x", model="m")
    messages = [{"role": "user", "content": "q"}]
    raw = request_body(cfg, messages, 0.3, 64)
    parsed = json.loads(raw)
    assert set(parsed) == {"model", "messages", "temperature", "max_tokens"}
    assert raw == (
        b'{"max_tokens":64,"messages":[{"content":"q","role":"user"}],'
        b'"model":"m","temperature":0.3}'
    )
    with_stop = json.loads(request_body(cfg, messages, 0.3, 64, stop=["</answer>"]))
    assert with_stop["stop"] == ["</answer>"]


def test_stub_records_exact_request_bytes():
    with StubServer([{"status": 200, "body": completion_body("ok")}]) as server:
        cfg = _cfg(server)
        complete(cfg, [{"role": "user", "content": "hi"}], temperature=0.5, max_tokens=16)
        assert server.requests[0].raw == request_body(
            cfg, [{"role": "user", "content": "hi"}], 0.5, 16
        )
        assert server.requests[0].path == "/v1/chat/completions"


def test_retry_schedule_on_5xx():
    scenario = [
        {"status": 500, "body": {"error": "boom"}},
        {"status": 503, "body": {"error": "busy"}},
        {"status": 200, "body": completion_body("fine")},
    ]
    with StubServer(scenario) as server:
        result = complete(
            _cfg(server), [{"role": "user", "content": "q"}],
            temperature=0.0, max_tokens=8,
        )
        assert result.text == "fine"
        assert len(server.requests) == 3


def test_retries_exhausted_raises_with_body():
    scenario = [{"status": 500, "body": {"error": "down"}}] * 3
    with StubServer(scenario) as server:
        with pytest.raises(EndpointError) as err:
            complete(
                _cfg(server, max_retries=2), [{"role": "user", "content": "q"}],
                temperature=0.0, max_tokens=8,
            )
        assert "down" in err.value.body


def test_4xx_fails_immediately_without_retry():
    with StubServer([{"status": 401, "body": {"error": "no auth"}}]) as server:
        with pytest.raises(EndpointError):
            complete(
                _cfg(server), [{"role": "user", "content": "q"}],
                temperature=0.0, max_tokens=8,
            )
        assert len(server.requests) == 1


def test_malformed_payload_is_protocol_error():
    with StubServer([{"status": 200, "body": {"nonsense": True}}]) as server:
        with pytest.raises(ProtocolError) as err:
            complete(
                _cfg(server), [{"role": "user", "content": "q"}],
                temperature=0.0, max_tokens=8,
            )
        assert "nonsense" in err.value.body


def test_auth_token_from_environment(monkeypatch):
    with StubServer(lambda req, i: (200, completion_body("ok"), 0.0)) as server:
        monkeypatch.setenv("XRLAB_TEST_TOKEN", "sekrit")
        complete(
            _cfg(server, auth_env="XRLAB_TEST_TOKEN"),
            [{"role": "user", "content": "q"}], temperature=0.0, max_tokens=8,
        )
    # header captured? StubServer stores raw body only; auth is transport-level,
    # round-trip success with auth_env set is the contract here
    assert os.environ["XRLAB_TEST_TOKEN"] == "sekrit"


def test_forced_exit_single_phase_when_natural_stop():
    body = completion_body("<think>t</think><answer>9</answer>", "stop")
    with StubServer([{"status": 200, "body": body}]) as server:
        gen = generate_with_forced_exit(_cfg(server), "q", _gen_cfg())
        assert gen.termination == "natural-eos"
        assert gen.injected_position is None
        assert len(server.requests) == 1


def test_forced_exit_two_phases_when_length_capped():
    phase1 = "thinking forever and ever"
    phase2 = "<answer>42</answer>"
    scenario = [
        {"status": 200, "body": completion_body(phase1, "length")},
        {"status": 200, "body": completion_body(phase2, "stop")},
    ]
    with StubServer(scenario) as server:
        gen = generate_with_forced_exit(_cfg(server), "q", _gen_cfg())
        assert gen.termination == "forced-exit"
        assert gen.text == phase1 + "</think>" + phase2
        assert gen.text.count("</think>") == 1
        assert gen.injected_position == len(phase1)
        assert len(server.requests) == 2
        second = server.requests[1].json
        assert second["messages"][1]["role"] == "assistant"
        assert second["messages"][1]["content"] == phase1 + "</think>"
        assert second["max_tokens"] == 4


def test_forced_exit_skips_phase_two_if_think_closed():
    text = "<think>t</think><answer>1</answer>"
    with StubServer([{"status": 200, "body": completion_body(text, "length")}]) as server:
        gen = generate_with_forced_exit(_cfg(server), "q", _gen_cfg())
        assert gen.termination == "hard-cap"
        assert len(server.requests) == 1


def test_in_flight_bound_never_exceeded():
    examples, traces = gen_arithmetic(seed=1, n=12, max_digits=1)
    texts = {t.example_id: t.text for t in traces}
    answers = list(texts.values())

    def scripted(req, i):
        return 200, completion_body(answers[i % len(answers)], "stop"), 0.01

    with StubServer(scripted) as server:
        cfg = _cfg(server, max_in_flight=3)
        source = RemoteSource(cfg, _gen_cfg())
        evaluate(
            source, examples, EvalRunConfig(n_runs=2, seed=0),
            max_workers=cfg.max_in_flight,
        )
        assert server.max_in_flight <= 3
        assert len(server.requests) == 12 * 3  # greedy + 2 runs


def test_deterministic_stub_gives_identical_outputs():
    text = completion_body("<think>t</think><answer>5</answer>", "stop")
    with StubServer(lambda req, i: (200, text, 0.0)) as server:
        cfg = _cfg(server)
        a = generate_with_forced_exit(cfg, "same prompt", _gen_cfg(), temperature=0.0)
        b = generate_with_forced_exit(cfg, "same prompt", _gen_cfg(), temperature=0.0)
        assert a == b


def test_remote_and_transcript_sources_agree_on_replayed_texts():
    examples, traces = gen_arithmetic(seed=2, n=4, max_digits=1)
    texts = {t.example_id: t.text for t in traces}
    cfg = EvalRunConfig(n_runs=2, temperature=0.3, seed=7)

    transcript = {e.id: [texts[e.id]] for e in examples}
    local_report = evaluate(
        TranscriptSource(transcript), examples, cfg, dataset_id="replay"
    )

    # stub replays the same per-question text; requests arrive sequentially
    order = []
    for e in examples:
        order += [texts[e.id]] * 3  # greedy + 2 runs

    def scripted(req, i):
        return 200, completion_body(order[i], "stop"), 0.0

    with StubServer(scripted) as server:
        remote_report = evaluate(
            RemoteSource(_cfg(server), _gen_cfg()), examples, cfg, dataset_id="replay"
        )
    assert remote_report.per_question == local_report.per_question
    assert remote_report.aggregates == local_report.aggregates


def test_scenario_file_roundtrip(tmp_path):
    scenario = [{"status": 200, "body": completion_body("hi"), "delay": 0.0}]
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(scenario))
    with StubServer.from_scenario_file(path) as server:
        result = complete(
            _cfg(server), [{"role": "user", "content": "x"}],
            temperature=0.0, max_tokens=4,
        )
        assert result.text == "hi"
