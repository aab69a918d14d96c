"""Answer extraction and binary verifiable reward.

Reward is 1 iff the last well-formed <answer>...</answer> block matches the
gold answer under the kind's normalization rules, 0 otherwise. Format rewards
are deliberately omitted: a correct answer outside the tags scores 0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction

NUMERIC = "numeric"
MCQ = "mcq"

_ANSWER_BLOCK = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_MCQ_LETTER = re.compile(r"([A-Za-z])\s*(?::.*)?", re.DOTALL)

# Sentinel prefix for numeric strings that fail rational parsing; "[" cannot
# appear in a canonical rational, so sentinels only ever equal themselves.
_UNPARSABLE = "[unparsable]"


@dataclass(frozen=True)
class ExtractedAnswer:
    raw: str
    normalized: str
    present: bool

    @classmethod
    def absent(cls) -> "ExtractedAnswer":
        return cls(raw="", normalized="", present=False)


def extract_answer(text: str, kind: str | None = None) -> ExtractedAnswer:
    """Contents of the last well-formed answer block, trimmed.

    Absence is a value (present=False), not an error. When ``kind`` is given
    the normalized form is filled in; otherwise it is the trimmed raw text.
    """
    blocks = _ANSWER_BLOCK.findall(text)
    if not blocks:
        return ExtractedAnswer.absent()
    raw = blocks[-1].strip()
    normalized = normalize(raw, kind) if kind is not None else raw
    return ExtractedAnswer(raw=raw, normalized=normalized, present=True)


def normalize(answer: str, kind: str) -> str:
    """Deterministic canonical form used on both sides of the comparison.

    numeric: drop whitespace/commas/leading "+", then exact rational parsing
    (integers, decimals, a/b fractions) canonicalized by fractions.Fraction;
    unparsable strings map to a self-only-equal sentinel.
    mcq: a leading option letter (bare or "X: text") uppercased; anything
    else is uppercased wholesale so it can never collide with a letter gold.
    """
    if kind == NUMERIC:
        s = re.sub(r"\s+", "", answer).replace(",", "").lstrip("+")
        try:
            return str(Fraction(s))
        except (ValueError, ZeroDivisionError):
            return f"{_UNPARSABLE}{s}"
    if kind == MCQ:
        s = answer.strip()
        m = _MCQ_LETTER.fullmatch(s)
        if m:
            return m.group(1).upper()
        return s.upper()
    raise ValueError(f"unknown answer kind: {kind!r}")


def is_equivalent(pred: str, gold: str, kind: str) -> bool:
    return normalize(pred, kind) == normalize(gold, kind)


def kind_of(example) -> str:
    """Map an Example's kind field to the verifier's normalization kind."""
    return MCQ if example.kind == "multiple-choice" else NUMERIC


def reward(text: str, example) -> int:
    """Binary verifiable reward for a generated text against an Example."""
    extracted = extract_answer(text)
    if not extracted.present:
        return 0
    return 1 if is_equivalent(extracted.raw, example.gold_answer, kind_of(example)) else 0
