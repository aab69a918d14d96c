"""Seeded generators of synthetic verifiable tasks with oracle reasoning traces.

Two families:

* arithmetic — "Compute a<op>b." with exact integer golds and a
  place-value decomposition trace;
* contextual MCQ — symbol lookup questions whose needed fact lives in a
  maskable ``context`` channel, with a configurable fraction planted to be
  answerable from the question alone.

Generators are pure functions of (seed, parameters).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError

NUMERIC = "numeric"
MULTIPLE_CHOICE = "multiple-choice"

OPTION_LETTERS = "ABCDEFGHIJ"

_SYMBOLS = ("X", "Y", "Z", "P", "Q", "R", "S", "T", "U", "W", "K", "M", "N")

# Prompt templates. {question} and {options} are substituted verbatim; the
# options block is appended only when the example carries options.
TRAIN_TEMPLATE = (
    "You will solve a problem/request. You should provide your thoughts "
    "within <think> </think> tags before providing the answer.\n"
    "Write your final answer within <answer> </answer> tags. "
    "Here is the question: {question}"
)

MCQ_TEMPLATE = (
    "You should provide your thoughts within <think> </think> tags, then "
    "answer with just one of the options below within <answer> </answer> "
    "tags (For example, if the question is \n'Is the earth flat?\n A: Yes "
    "\nB: No', you should answer with <think>...</think> <answer>B: No"
    "</answer>). Here is the question: {question}"
)

MATH_TEMPLATE = (
    "A conversation between User and Assistant. The user asks a question, "
    "and you as the assistant solves it. You should first think about "
    "the reasoning process in the mind and then provide the user with "
    "the answer. The reasoning process and answer are enclosed within "
    "<think> </think> and <answer> </answer> tags, respectively, i.e., "
    "<think> reasoning process here </think><answer> the final answer "
    "as the option letter or the number depending on the question "
    "</answer> (For example, if the question is \n'Is the earth flat?\n "
    "A: Yes \nB: No', you should answer with <think> your reasoning "
    "</think> <answer>B: No</answer>. If the question is 'What is 1+1?', "
    "you should answer with <think> your reasoning </think> <answer>2"
    "</answer>).\n\nHere is the question: {question}"
)

_OPTIONS_BLOCK = "\nOptions:\n\n{options}"

_TEMPLATES = {"train": TRAIN_TEMPLATE, "mcq": MCQ_TEMPLATE, "math": MATH_TEMPLATE}


@dataclass(frozen=True)
class Example:
    id: str
    question: str
    context: str | None
    options: list[str] | None
    gold_answer: str
    kind: str

    def __post_init__(self):
        if not self.gold_answer:
            raise InputError(f"example {self.id}: empty gold_answer")
        if self.kind not in (NUMERIC, MULTIPLE_CHOICE):
            raise InputError(f"example {self.id}: unknown kind {self.kind!r}")
        if self.kind == MULTIPLE_CHOICE:
            if not self.options:
                raise InputError(f"example {self.id}: multiple-choice needs options")
            letters = OPTION_LETTERS[: len(self.options)]
            if self.gold_answer not in letters:
                raise InputError(
                    f"example {self.id}: gold {self.gold_answer!r} not an option letter"
                )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "context": self.context,
            "options": self.options,
            "gold_answer": self.gold_answer,
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Example":
        return cls(
            id=d["id"],
            question=d["question"],
            context=d.get("context"),
            options=list(d["options"]) if d.get("options") is not None else None,
            gold_answer=d["gold_answer"],
            kind=d["kind"],
        )


@dataclass(frozen=True)
class OracleTrace:
    example_id: str
    text: str


def render_prompt(example: Example, template_kind: str) -> str:
    """Instantiate a prompt template for one example.

    Context, when present, is prepended to the question text; options render
    as "A: ...", one per line.
    """
    if template_kind not in _TEMPLATES:
        raise InputError(f"unknown template kind: {template_kind!r}")
    if template_kind == "mcq" and not example.options:
        raise InputError("mcq template requires options")
    question = example.question
    if example.context:
        question = f"{example.context}\n{question}"
    prompt = _TEMPLATES[template_kind].replace("{question}", question)
    if example.options:
        options = "\n".join(
            f"{OPTION_LETTERS[i]}: {opt}" for i, opt in enumerate(example.options)
        )
        prompt += _OPTIONS_BLOCK.replace("{options}", options)
    return prompt


def mask_context(example: Example) -> Example:
    """Copy with the context channel removed; idempotent."""
    if example.context is None:
        return dataclasses.replace(example)
    return dataclasses.replace(example, context=None)


# --- arithmetic ---


def _digits_lsb(x: int, width: int) -> list[int]:
    return [(x // 10**p) % 10 for p in range(width)]


def _addition_trace(a: int, b: int, width: int) -> str:
    """Place-value decomposition with an explicit carry digit per step.

    Each step result is zero-padded to two digits so the carry is always the
    first character; the final answer is zero-padded to width+1 for the same
    fixed-position reason. Leading zeros are stripped by normalization, so
    the padded answer still verifies against the plain gold.
    """
    da, db = _digits_lsb(a, width), _digits_lsb(b, width)
    steps = []
    carry = 0
    for p in range(width):
        s = da[p] + db[p] + (carry if p else 0)
        steps.append(
            f"{da[p]}+{db[p]}={s:02d}" if p == 0 else f"{da[p]}+{db[p]}+{carry}={s:02d}"
        )
        carry = s // 10
    final = f"{a + b:0{width + 1}d}"
    think = ",".join(steps) + ",=" + final
    return f"<think>{think}</think><answer>{final}</answer>"


def _subtraction_trace(a: int, b: int, width: int) -> str:
    if a < b:
        return f"<think>{a}-{b}={a - b}</think><answer>{a - b}</answer>"
    da, db = _digits_lsb(a, width), _digits_lsb(b, width)
    steps = []
    borrow = 0
    for p in range(width):
        d = da[p] - db[p] - (borrow if p else 0)
        new_borrow = 1 if d < 0 else 0
        if new_borrow:
            d += 10
        steps.append(
            f"{da[p]}-{db[p]}={new_borrow}{d}"
            if p == 0
            else f"{da[p]}-{db[p]}-{borrow}={new_borrow}{d}"
        )
        borrow = new_borrow
    final = f"{a - b:0{width + 1}d}"
    think = ",".join(steps) + ",=" + final
    return f"<think>{think}</think><answer>{final}</answer>"


def _multiplication_trace(a: int, b: int) -> str:
    c = a * b
    direct = f"<think>{a}*{b}={c}</think><answer>{c}</answer>"
    if b == 0:
        return direct
    terms = [
        (digit * 10**p, a * digit * 10**p)
        for p, digit in reversed(list(enumerate(_digits_lsb(b, len(str(b))))))
        if digit
    ]
    if len(terms) < 2:
        return direct
    lhs = "+".join(f"{a}*{t}" for t, _ in terms)
    mid = "+".join(str(v) for _, v in terms)
    think = f"{a}*{b}={lhs}={mid}={c}"
    decomposed = f"<think>{think}</think><answer>{c}</answer>"
    # keep traces short enough for a small-context policy to learn from
    return decomposed if len(decomposed) <= 64 else direct


def _trace_for(a: int, b: int, op: str, width: int) -> str:
    if op == "+":
        return _addition_trace(a, b, width)
    if op == "-":
        return _subtraction_trace(a, b, width)
    if op == "*":
        return _multiplication_trace(a, b)
    raise InputError(f"unknown operator: {op!r}")


def gen_arithmetic(
    seed: int,
    n: int,
    max_digits: int = 2,
    ops: tuple[str, ...] = ("+", "-", "*"),
) -> tuple[list[Example], list[OracleTrace]]:
    """n "Compute a<op>b." examples with exact golds and oracle traces.

    Operands are fixed-width: single digits when max_digits is 1, otherwise
    uniform over [10^(d-1), 10^d). Fixed widths keep digit positions stable,
    which is what makes the traces learnable by a small fixed-context policy.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    if not 1 <= max_digits <= 4:
        raise InputError("max_digits must be in [1, 4]")
    if not ops or any(op not in "+-*" for op in ops):
        raise InputError(f"ops must be drawn from +, -, *: {ops!r}")
    rng = np.random.default_rng(seed)
    lo = 0 if max_digits == 1 else 10 ** (max_digits - 1)
    hi = 10**max_digits
    examples, traces = [], []
    for i in range(n):
        a = int(rng.integers(lo, hi))
        b = int(rng.integers(lo, hi))
        op = ops[int(rng.integers(0, len(ops)))]
        gold = {"+": a + b, "-": a - b, "*": a * b}[op]
        ex_id = f"arith{seed}-{i:05d}"
        examples.append(
            Example(
                id=ex_id,
                question=f"Compute {a}{op}{b}.",
                context=None,
                options=None,
                gold_answer=str(gold),
                kind=NUMERIC,
            )
        )
        traces.append(OracleTrace(example_id=ex_id, text=_trace_for(a, b, op, max_digits)))
    return examples, traces


# --- contextual multiple choice ---


def gen_contextual_mcq(
    seed: int,
    n: int,
    n_options: int = 4,
    planted_fraction: float = 0.3,
) -> tuple[list[Example], list[OracleTrace]]:
    """Symbol-lookup MCQs whose needed fact lives in the context channel.

    A deterministic round(planted_fraction * n) subset carries the fact in
    the question itself ("Given X=5, ..."), so those stay solvable when the
    context is masked. The rest only state the fact in the context table.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    if not 2 <= n_options <= 10:
        raise InputError("n_options must be in [2, 10]")
    if not 0.0 <= planted_fraction <= 1.0:
        raise InputError("planted_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    planted = set(rng.permutation(n)[: round(planted_fraction * n)].tolist())
    examples, traces = [], []
    for i in range(n):
        sym_ids = rng.permutation(len(_SYMBOLS))[:4]
        sym = _SYMBOLS[sym_ids[0]]
        decoy_syms = [_SYMBOLS[j] for j in sym_ids[1:]]
        values = (1 + rng.permutation(99))[: 3 + n_options]
        val = int(values[0])
        decoys = [f"{s}={int(v)}" for s, v in zip(decoy_syms, values[1:4])]
        option_values = [val] + [int(v) for v in values[4 : 3 + n_options]]
        order = rng.permutation(n_options)
        options = [str(option_values[j]) for j in order]
        gold_letter = OPTION_LETTERS[int(np.where(order == 0)[0][0])]
        if i in planted:
            question = f"Given {sym}={val}, what is the value of {sym}?"
            facts = decoys
        else:
            question = f"What is the value of {sym}?"
            facts = decoys + [f"{sym}={val}"]
            facts = [facts[j] for j in rng.permutation(len(facts))]
        context = "Table: " + ", ".join(facts) + "."
        ex_id = f"mcq{seed}-{i:05d}"
        examples.append(
            Example(
                id=ex_id,
                question=question,
                context=context,
                options=options,
                gold_answer=gold_letter,
                kind=MULTIPLE_CHOICE,
            )
        )
        traces.append(
            OracleTrace(
                example_id=ex_id,
                text=(
                    f"<think>{sym}={val}, option {gold_letter}</think>"
                    f"<answer>{gold_letter}</answer>"
                ),
            )
        )
    return examples, traces


def planted_ids(examples: list[Example]) -> set[str]:
    """Ids of MCQ examples whose question alone states the needed fact."""
    return {e.id for e in examples if e.question.startswith("Given ")}


# --- JSONL persistence (field names exactly as the types) ---


def dump_examples(examples: list[Example]) -> str:
    return "".join(json.dumps(e.to_dict()) + "\n" for e in examples)


def load_examples(text: str) -> list[Example]:
    examples = [Example.from_dict(json.loads(line)) for line in text.splitlines() if line]
    ids = [e.id for e in examples]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate example ids in dataset")
    return examples


def dump_traces(traces: list[OracleTrace]) -> str:
    return "".join(
        json.dumps({"example_id": t.example_id, "text": t.text}) + "\n" for t in traces
    )


def load_traces(text: str) -> list[OracleTrace]:
    return [
        OracleTrace(example_id=d["example_id"], text=d["text"])
        for d in (json.loads(line) for line in text.splitlines() if line)
    ]
