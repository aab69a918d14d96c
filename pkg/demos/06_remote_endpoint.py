"""Evaluating a chat-completions endpoint, with wire-level forced exit.

Spins up the bundled scriptable stub server, then shows the client's retry
behavior, the two-phase forced-exit protocol, and a full evaluation run over
the wire with a bounded number of in-flight requests.
"""

from xrlab.evaluation import EvalRunConfig, evaluate
from xrlab.genctl import GenConfig
from xrlab.remote import (
    EndpointConfig,
    RemoteSource,
    StubServer,
    complete,
    completion_body,
    generate_with_forced_exit,
)
from xrlab.tasks import gen_arithmetic

examples, traces = gen_arithmetic(seed=5, n=6, max_digits=1)
texts = {t.example_id: t.text for t in traces}

# 1. retries: two 500s, then success
scenario = [
    {"status": 500, "body": {"error": "cold start"}},
    {"status": 500, "body": {"error": "still warming"}},
    {"status": 200, "body": completion_body("<think>ok</think><answer>2</answer>")},
]
with StubServer(scenario) as server:
    cfg = EndpointConfig(
        base_url=server.base_url, model="demo-model",
        timeout=5.0, max_retries=3, backoff_base=0.05, max_in_flight=3,
    )
    result = complete(cfg, [{"role": "user", "content": "1+1?"}], temperature=0.0, max_tokens=32)
    print(f"after {len(server.requests)} requests: {result.text!r} ({result.finish_reason})")

# 2. forced exit on the wire: phase one runs out of think budget, the client
# appends the closing tag and asks for a short answer continuation
scenario = [
    {"status": 200, "body": completion_body("let me think about this foreve", "length")},
    {"status": 200, "body": completion_body("<answer>2</answer>", "stop")},
]
with StubServer(scenario) as server:
    cfg = EndpointConfig(base_url=server.base_url, model="demo-model", backoff_base=0.05)
    gen = generate_with_forced_exit(
        cfg, "what is 1+1?", GenConfig(max_response_tokens=64, think_budget=8, answer_budget=8)
    )
    print(f"\nforced exit: termination={gen.termination}, injected at char {gen.injected_position}")
    print(f"stitched text: {gen.text!r}")

# 3. the identical evaluation protocol, over the wire, bounded concurrency;
# this stub actually reads the question out of the request body
def scripted(request, index):
    content = request["messages"][0]["content"]
    for e in examples:
        if e.question in content:
            return 200, completion_body(texts[e.id], "stop"), 0.002
    return 200, completion_body("<think>no idea</think>", "stop"), 0.002


with StubServer(scripted) as server:
    cfg = EndpointConfig(base_url=server.base_url, model="demo-model", max_in_flight=3)
    source = RemoteSource(cfg, GenConfig(max_response_tokens=64, think_budget=16, answer_budget=8))
    report = evaluate(
        source, examples, EvalRunConfig(n_runs=2, temperature=0.3, seed=0),
        dataset_id="stub", max_workers=cfg.max_in_flight,
    )
    print(f"\nremote eval over {report.aggregates['n_questions']} questions:")
    print(f"greedy {report.aggregates['greedy_acc']:.2f}, avg {report.aggregates['avg_acc']:.2f}")
    print(f"stub saw {len(server.requests)} requests, max in flight {server.max_in_flight}")
