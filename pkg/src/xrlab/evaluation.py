"""Evaluation protocol: greedy plus multi-run sampling metrics over any source.

A source is anything that can answer a rendered prompt (a local policy, a
remote endpoint, recorded transcripts, a text-lookup oracle). Each question
gets an optional greedy pass plus n sampled passes; the verifier scores every
response, and the report carries per-question records from which every
aggregate can be recomputed exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

from . import policy, verifier
from .errors import ConfigError, InputError
from .genctl import CLIPPED_TERMINATIONS, GenConfig, NATURAL_EOS, generate
from .seeding import derive_rng, derive_seed
from .tasks import Example, OPTION_LETTERS, OracleTrace, mask_context, render_prompt
from .tokens import Vocab


@dataclass(frozen=True)
class EvalRunConfig:
    n_runs: int = 5
    temperature: float = 0.3
    include_greedy: bool = True
    max_tokens: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")


@dataclass(frozen=True)
class SourceResponse:
    text: str
    termination: str = NATURAL_EOS
    n_tokens: int | None = None


class AnswerSource(Protocol):
    def respond(
        self, example: Example, prompt: str, *, temperature: float, max_tokens: int, seed: int
    ) -> SourceResponse: ...


def template_for(example: Example) -> str:
    return "mcq" if example.kind == "multiple-choice" else "math"


class LocalPolicySource:
    """Answers by decoding the local policy on the rendered prompt."""

    def __init__(self, params: policy.PolicyParams, vocab: Vocab, gen_cfg: GenConfig):
        self.params = params
        self.vocab = vocab
        self.gen_cfg = gen_cfg

    def respond(self, example, prompt, *, temperature, max_tokens, seed):
        cfg = replace(
            self.gen_cfg, temperature=temperature, max_response_tokens=max_tokens, seed=seed
        )
        rng = derive_rng(seed) if temperature > 0 else None
        episode = generate(self.params, self.vocab, prompt, cfg, rng)
        return SourceResponse(
            text=self.vocab.decode(episode.response),
            termination=episode.termination,
            n_tokens=len(episode.response),
        )


class OracleTraceSource:
    """Always answers with the example's oracle trace (accuracy 1 by design)."""

    def __init__(self, traces: list[OracleTrace]):
        self._by_id = {t.example_id: t.text for t in traces}

    def respond(self, example, prompt, *, temperature, max_tokens, seed):
        return SourceResponse(text=self._by_id[example.id])


class TranscriptSource:
    """Replays recorded texts per example, consumed in call order.

    Use with sequential evaluation (max_workers=1) so the call order is the
    deterministic greedy-then-runs order.
    """

    def __init__(self, transcripts: dict[str, list[str]]):
        self._transcripts = transcripts
        self._cursors: dict[str, int] = {}

    def respond(self, example, prompt, *, temperature, max_tokens, seed):
        recorded = self._transcripts[example.id]
        i = self._cursors.get(example.id, 0)
        self._cursors[example.id] = i + 1
        return SourceResponse(text=recorded[i % len(recorded)])


_VALUE_OF = re.compile(r"value of ([A-Za-z])\?")


class TextOracleSource:
    """Solves generated lookup MCQs exactly when the fact is in visible text.

    Searches the rendered prompt for "<symbol>=<value>"; if found and the
    value is among the options it answers that letter, otherwise it emits no
    answer block at all (reward 0). Never peeks at the gold answer.
    """

    def respond(self, example, prompt, *, temperature, max_tokens, seed):
        m = _VALUE_OF.search(example.question)
        if m and example.options:
            sym = m.group(1)
            fact = re.search(rf"\b{re.escape(sym)}=(\d+)\b", prompt)
            if fact and fact.group(1) in example.options:
                letter = OPTION_LETTERS[example.options.index(fact.group(1))]
                return SourceResponse(
                    text=f"<think>{sym}={fact.group(1)}</think><answer>{letter}</answer>"
                )
        return SourceResponse(text="<think>fact unavailable</think>")


def majority_vote(answers) -> str | None:
    """Most frequent answer; ties break to the earliest first occurrence.

    Absent answers (None) count as a distinct value and can win.
    """
    answers = list(answers)
    if not answers:
        raise InputError("majority_vote needs a non-empty list")
    counts: dict = {}
    first: dict = {}
    for i, a in enumerate(answers):
        counts[a] = counts.get(a, 0) + 1
        first.setdefault(a, i)
    return max(counts, key=lambda a: (counts[a], -first[a]))


def pass_at_n(flags) -> bool:
    flags = list(flags)
    if not flags:
        raise InputError("pass_at_n needs a non-empty list")
    return any(flags)


def _score(resp: SourceResponse, example: Example, kind: str) -> dict:
    extracted = verifier.extract_answer(resp.text, kind)
    length = resp.n_tokens if resp.n_tokens is not None else len(resp.text.split())
    return {
        "raw": extracted.raw,
        "answer": extracted.normalized if extracted.present else None,
        "correct": bool(
            extracted.present
            and verifier.is_equivalent(extracted.raw, example.gold_answer, kind)
        ),
        "length": int(length),
        "termination": resp.termination,
    }


def recompute_aggregates(per_question: list[dict]) -> dict:
    """Aggregate metrics from per-question records; evaluate() uses this too."""
    n = len(per_question)
    if n == 0:
        return {
            "greedy_acc": None,
            "avg_acc": 0.0,
            "majority_acc": 0.0,
            "pass_at_n": 0.0,
            "mean_response_len": 0.0,
            "clip_fraction": 0.0,
            "n_questions": 0,
        }
    has_greedy = all(q["greedy"] is not None for q in per_question)
    greedy_acc = (
        sum(q["greedy"]["correct"] for q in per_question) / n if has_greedy else None
    )
    avg = 0.0
    majority = 0.0
    passed = 0.0
    lengths: list[int] = []
    clipped = 0
    for q in per_question:
        flags = [r["correct"] for r in q["runs"]]
        avg += sum(flags) / len(flags)
        majority += majority_vote([r["answer"] for r in q["runs"]]) == q["gold"]
        passed += pass_at_n(flags)
        responses = list(q["runs"]) + ([q["greedy"]] if q["greedy"] is not None else [])
        lengths.extend(r["length"] for r in responses)
        clipped += sum(r["termination"] in CLIPPED_TERMINATIONS for r in responses)
    return {
        "greedy_acc": greedy_acc,
        "avg_acc": avg / n,
        "majority_acc": majority / n,
        "pass_at_n": passed / n,
        "mean_response_len": float(np.mean(lengths)),
        "clip_fraction": clipped / len(lengths),
        "n_questions": n,
    }


@dataclass
class EvalReport:
    dataset_id: str
    config: dict
    config_hash: str
    per_question: list[dict]
    errored: list[dict]
    aggregates: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def aggregates_csv(self) -> str:
        keys = list(self.aggregates)
        values = [
            "" if self.aggregates[k] is None else repr(self.aggregates[k]) for k in keys
        ]
        return ",".join(keys) + "\n" + ",".join(values) + "\n"


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def evaluate(
    source: AnswerSource,
    dataset: list[Example],
    cfg: EvalRunConfig,
    *,
    template_kind: str | None = None,
    dataset_id: str = "",
    max_workers: int = 1,
) -> EvalReport:
    """Greedy pass (optional) plus n_runs sampled passes, scored and aggregated.

    A source failure on any pass marks the whole question errored and drops
    it from every denominator; the report carries the error list.
    """
    if not dataset:
        raise InputError("dataset is empty")

    def work(example: Example) -> dict:
        kind = verifier.kind_of(example)
        prompt = render_prompt(example, template_kind or template_for(example))
        greedy = None
        if cfg.include_greedy:
            resp = source.respond(
                example,
                prompt,
                temperature=0.0,
                max_tokens=cfg.max_tokens,
                seed=derive_seed(cfg.seed, "greedy", example.id),
            )
            greedy = _score(resp, example, kind)
        runs = []
        for r in range(cfg.n_runs):
            resp = source.respond(
                example,
                prompt,
                temperature=cfg.temperature,
                max_tokens=cfg.max_tokens,
                seed=derive_seed(cfg.seed, "run", r, example.id),
            )
            runs.append(_score(resp, example, kind))
        return {
            "id": example.id,
            "gold": verifier.normalize(example.gold_answer, kind),
            "kind": kind,
            "greedy": greedy,
            "runs": runs,
        }

    results: list[dict | None] = [None] * len(dataset)
    errored: list[dict] = []
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {i: pool.submit(work, ex) for i, ex in enumerate(dataset)}
            for i, fut in futures.items():
                try:
                    results[i] = fut.result()
                except Exception as e:
                    errored.append({"id": dataset[i].id, "error": str(e)})
    else:
        for i, ex in enumerate(dataset):
            try:
                results[i] = work(ex)
            except Exception as e:
                errored.append({"id": ex.id, "error": str(e)})
    per_question = [r for r in results if r is not None]
    config = {
        "n_runs": cfg.n_runs,
        "temperature": cfg.temperature,
        "include_greedy": cfg.include_greedy,
        "max_tokens": cfg.max_tokens,
        "seed": cfg.seed,
        "template_kind": template_kind,
    }
    aggregates = recompute_aggregates(per_question)
    aggregates["n_errored"] = len(errored)
    return EvalReport(
        dataset_id=dataset_id,
        config=config,
        config_hash=_config_hash(config),
        per_question=per_question,
        errored=errored,
        aggregates=aggregates,
    )


# --- text-solvable ablation filter ---


@dataclass
class AblationReport:
    original: int
    removed: int
    remaining: int
    mode: str
    removed_ids: list[str]
    solvable_a: list[str]
    solvable_b: list[str]
    errored: list[dict]

    def format_line(self) -> str:
        return f"{self.original} - {self.removed} = {self.remaining}"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)


def _consistently_solved(
    source: AnswerSource,
    examples: list[Example],
    *,
    samples_per_model: int,
    temperature: float,
    max_tokens: int,
    seed: int,
    label: str,
    errored: list[dict],
    template_kind: str | None,
) -> set[str]:
    solved: set[str] = set()
    for ex in examples:
        prompt = render_prompt(ex, template_kind or template_for(ex))
        try:
            flags = []
            for s in range(samples_per_model):
                resp = source.respond(
                    ex,
                    prompt,
                    temperature=temperature,
                    max_tokens=max_tokens,
                    seed=derive_seed(seed, "ablate", label, s, ex.id),
                )
                flags.append(verifier.reward(resp.text, ex) == 1)
            if all(flags):
                solved.add(ex.id)
        except Exception as e:
            # cannot establish consistent solvability; keep the question
            errored.append({"id": ex.id, "source": label, "error": str(e)})
    return solved


def context_ablation_filter(
    source_a: AnswerSource,
    source_b: AnswerSource,
    dataset: list[Example],
    *,
    samples_per_model: int = 3,
    mode: str = "union",
    temperature: float = 0.3,
    max_tokens: int = 4096,
    seed: int = 0,
    template_kind: str | None = None,
) -> tuple[list[Example], AblationReport]:
    """Remove questions both/either source solves consistently without context.

    Context is masked; each source answers each question samples_per_model
    times; a question counts as context-free-solvable for a source iff every
    sample is correct. mode "union" removes questions solvable by either
    source, "intersection" only those solvable by both.
    """
    if mode not in ("union", "intersection"):
        raise InputError(f"mode must be union or intersection: {mode!r}")
    if samples_per_model < 1:
        raise InputError("samples_per_model must be >= 1")
    if not dataset:
        raise InputError("dataset is empty")
    missing = [e.id for e in dataset if e.context is None]
    if missing:
        raise InputError(f"examples lack a context channel: {missing[:5]}")
    masked = [mask_context(e) for e in dataset]
    errored: list[dict] = []
    common = dict(
        samples_per_model=samples_per_model,
        temperature=temperature,
        max_tokens=max_tokens,
        seed=seed,
        errored=errored,
        template_kind=template_kind,
    )
    solved_a = _consistently_solved(source_a, masked, label="a", **common)
    solved_b = _consistently_solved(source_b, masked, label="b", **common)
    removed = solved_a | solved_b if mode == "union" else solved_a & solved_b
    retained = [e for e in dataset if e.id not in removed]
    report = AblationReport(
        original=len(dataset),
        removed=len(removed),
        remaining=len(retained),
        mode=mode,
        removed_ids=sorted(removed),
        solvable_a=sorted(solved_a),
        solvable_b=sorted(solved_b),
        errored=errored,
    )
    return retained, report
