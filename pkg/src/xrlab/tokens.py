"""Fixed vocabulary and reversible text <-> token-id codec.

The vocabulary is character-level plus a handful of multi-character control
tokens. Control tokens are encoded greedily (longest match first), so the
string "<think>" is always one token, never eight characters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InputError

THINK = "<think>"
END_THINK = "</think>"
ANSWER = "<answer>"
END_ANSWER = "</answer>"
EOS = "<eos>"

SPECIAL_TOKENS = (THINK, END_THINK, ANSWER, END_ANSWER, EOS)

# Printable ASCII plus newline covers every prompt template and task string.
_DEFAULT_CHARS = tuple(chr(c) for c in range(32, 127)) + ("\n",)


@dataclass(frozen=True)
class Vocab:
    """Ordered token set; token index is stable for a given instance."""

    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise InputError("vocab tokens must be unique")
        missing = [t for t in SPECIAL_TOKENS if t not in self.tokens]
        if missing:
            raise InputError(f"vocab missing special tokens: {missing}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def default(cls) -> "Vocab":
        return cls(tokens=SPECIAL_TOKENS + _DEFAULT_CHARS)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def think_id(self) -> int:
        return self._index[THINK]

    @property
    def end_think_id(self) -> int:
        return self._index[END_THINK]

    @property
    def answer_id(self) -> int:
        return self._index[ANSWER]

    @property
    def end_answer_id(self) -> int:
        return self._index[END_ANSWER]

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise InputError(f"token not in vocab: {token!r}") from None

    def encode(self, text: str) -> list[int]:
        """Greedy longest-match tokenization; unknown characters are errors."""
        ids: list[int] = []
        i = 0
        n = len(text)
        while i < n:
            if text[i] == "<":
                for special in SPECIAL_TOKENS:
                    if text.startswith(special, i):
                        ids.append(self._index[special])
                        i += len(special)
                        break
                else:
                    ids.append(self._char_id(text[i]))
                    i += 1
            else:
                ids.append(self._char_id(text[i]))
                i += 1
        return ids

    def decode(self, ids) -> str:
        parts = []
        for t in ids:
            t = int(t)
            if not 0 <= t < len(self.tokens):
                raise InputError(f"token index out of range: {t}")
            parts.append(self.tokens[t])
        return "".join(parts)

    def _char_id(self, ch: str) -> int:
        idx = self._index.get(ch)
        if idx is None:
            raise InputError(f"character not in vocab: {ch!r}")
        return idx
