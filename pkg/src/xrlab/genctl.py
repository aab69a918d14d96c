"""Autoregressive sampling controller with forced-exit and length accounting.

Decoding samples from softmax(logits / temperature) (argmax at temperature 0)
until EOS or a budget rule fires. Once the response reaches ``think_budget``
without a </think>, that token is injected (not sampled) and decoding
continues for at most ``answer_budget`` further tokens. A sampled EOS is
consumed as the terminator, never stored in the response.

Recorded log-probabilities are always at temperature 1 (training semantics);
temperature only shapes the sampling distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import policy
from .errors import ConfigError, InputError
from .tokens import Vocab

NATURAL_EOS = "natural-eos"
FORCED_EXIT = "forced-exit"
HARD_CAP = "hard-cap"

CLIPPED_TERMINATIONS = (FORCED_EXIT, HARD_CAP)


@dataclass(frozen=True)
class GenConfig:
    temperature: float = 1.0
    max_response_tokens: int = 4096
    think_budget: int = 96
    answer_budget: int = 64
    seed: int = 0
    forced_exit: bool = True

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_response_tokens < 1:
            raise ConfigError("max_response_tokens must be >= 1")
        if not 0 < self.think_budget < self.max_response_tokens:
            raise ConfigError("think_budget must be in (0, max_response_tokens)")
        if self.answer_budget < 0:
            raise ConfigError("answer_budget must be >= 0")
        if self.think_budget + self.answer_budget > self.max_response_tokens:
            raise ConfigError("think_budget + answer_budget exceeds max_response_tokens")


@dataclass
class Episode:
    """One generated sequence with prompt boundary and termination cause."""

    prompt: np.ndarray
    response: np.ndarray
    logprobs: np.ndarray | None
    termination: str
    injected_exit_position: int | None = None

    def __post_init__(self):
        if (self.termination == FORCED_EXIT) != (self.injected_exit_position is not None):
            raise InputError("forced-exit termination iff injected_exit_position set")


def loss_mask(episode: Episode) -> np.ndarray:
    """True for response positions the policy chose itself (injected excluded)."""
    mask = np.ones(len(episode.response), dtype=bool)
    if episode.injected_exit_position is not None:
        mask[episode.injected_exit_position] = False
    return mask


@dataclass
class GenState:
    """Mutable per-stream decode state consulted by the forced-exit rule."""

    response: list[int] = field(default_factory=list)
    logprobs: list[float] = field(default_factory=list)
    injected_exit_position: int | None = None
    emitted_end_think: bool = False


def apply_forced_exit(state: GenState, cfg: GenConfig, vocab: Vocab) -> bool:
    """Inject </think> when the think budget is exhausted without one.

    Returns True when the injection happened this call; the caller records
    the injected token's log-probability and skips sampling for the step.
    """
    if not cfg.forced_exit or state.injected_exit_position is not None:
        return False
    if state.emitted_end_think or len(state.response) != cfg.think_budget:
        return False
    state.injected_exit_position = len(state.response)
    state.response.append(vocab.end_think_id)
    return True


def generate_many(
    params: policy.PolicyParams,
    vocab: Vocab,
    prompts: list,
    cfg: GenConfig,
    rngs: list[np.random.Generator] | None = None,
) -> list[Episode]:
    """Decode a batch of prompts in lockstep; one episode per prompt.

    Each stream consumes exactly one uniform draw from its own generator per
    sampled token, so results match a stream-by-stream sequential decode.
    """
    k = params.arch.context
    prompt_ids = [
        np.asarray(vocab.encode(p) if isinstance(p, str) else p, dtype=np.int64)
        for p in prompts
    ]
    if cfg.temperature > 0:
        if rngs is None or len(rngs) != len(prompts):
            raise InputError("temperature > 0 requires one rng per prompt")
    states = [GenState() for _ in prompt_ids]
    full = [list(p) for p in prompt_ids]
    terminations: list[str | None] = [None] * len(prompt_ids)
    active = list(range(len(prompt_ids)))

    while active:
        still = []
        for s in active:
            st = states[s]
            if len(st.response) >= cfg.max_response_tokens:
                terminations[s] = (
                    FORCED_EXIT if st.injected_exit_position is not None else HARD_CAP
                )
            elif (
                st.injected_exit_position is not None
                and len(st.response) - st.injected_exit_position - 1 >= cfg.answer_budget
            ):
                terminations[s] = FORCED_EXIT
            else:
                still.append(s)
        active = still
        if not active:
            break

        windows = np.full((len(active), k), -1, dtype=np.int64)
        for row, s in enumerate(active):
            tail = full[s][-k:]
            windows[row, k - len(tail) :] = tail
        logits = policy.batch_logits(params, windows, windows >= 0)
        logprobs = policy.log_softmax(logits)

        next_active = []
        for row, s in enumerate(active):
            st = states[s]
            if apply_forced_exit(st, cfg, vocab):
                st.logprobs.append(float(logprobs[row, vocab.end_think_id]))
                full[s].append(vocab.end_think_id)
                next_active.append(s)
                continue
            if cfg.temperature == 0:
                tok = int(np.argmax(logits[row]))
            else:
                probs = policy.softmax(logits[row] / cfg.temperature)
                u = rngs[s].random()
                tok = min(
                    int(np.searchsorted(np.cumsum(probs), u, side="right")),
                    params.arch.vocab_size - 1,
                )
            if tok == vocab.eos_id:
                terminations[s] = (
                    FORCED_EXIT if st.injected_exit_position is not None else NATURAL_EOS
                )
                continue
            st.response.append(tok)
            st.logprobs.append(float(logprobs[row, tok]))
            full[s].append(tok)
            if tok == vocab.end_think_id:
                st.emitted_end_think = True
            next_active.append(s)
        active = next_active

    episodes = []
    for s, st in enumerate(states):
        episodes.append(
            Episode(
                prompt=prompt_ids[s],
                response=np.asarray(st.response, dtype=np.int64),
                logprobs=np.asarray(st.logprobs),
                termination=terminations[s],
                injected_exit_position=st.injected_exit_position,
            )
        )
    return episodes


def generate(
    params: policy.PolicyParams,
    vocab: Vocab,
    prompt,
    cfg: GenConfig,
    rng: np.random.Generator | None = None,
) -> Episode:
    """Single-prompt decode; deterministic at temperature 0."""
    rngs = None if cfg.temperature == 0 else [rng]
    return generate_many(params, vocab, [prompt], cfg, rngs)[0]


def length_stats(episodes: list[Episode]) -> dict[str, float]:
    """Mean response token count and fraction of budget-limited episodes."""
    if not episodes:
        raise InputError("length_stats needs a non-empty batch")
    lengths = [len(e.response) for e in episodes]
    clipped = sum(e.termination in CLIPPED_TERMINATIONS for e in episodes)
    return {
        "mean_response_tokens": float(np.mean(lengths)),
        "clip_fraction": clipped / len(episodes),
    }
