"""Stage 1: rejection-sampling distillation and supervised fine-tuning.

Distillation samples k candidate traces per example from any text-producing
teacher, keeps only those the verifier scores 1, dedupes exact duplicates and
retains the shortest few. SFT then minimizes mean masked negative
log-likelihood per response token; prompt positions never receive weight, so
their gradients are exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import policy, verifier
from .errors import ConfigError, InputError, TrainingError
from .genctl import GenConfig, generate
from .seeding import derive_rng
from .tasks import Example, OracleTrace, render_prompt
from .tokens import Vocab

# A teacher maps (example, rng) to a candidate response text; raising marks a
# teacher failure for that candidate.
Teacher = Callable[[Example, np.random.Generator], str]


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 4
    lr: float = 1e-5
    lr_decay: float = 0.8
    batch_size: int = 32
    max_seq_len: int = 4096
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass(frozen=True)
class DistillConfig:
    keep_per_example: int = 1
    max_seq_len: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.keep_per_example < 1:
            raise ConfigError("keep_per_example must be >= 1")


@dataclass
class SftItem:
    example_id: str
    prompt: np.ndarray
    target: np.ndarray
    mask: np.ndarray  # bool over target positions

    def __post_init__(self):
        if self.mask.shape != self.target.shape:
            raise InputError("mask must align with target")


@dataclass
class DistillStats:
    total_examples: int = 0
    retained_examples: int = 0
    retained_targets: int = 0
    dropped_no_correct: int = 0
    teacher_failures: int = 0
    candidates_total: int = 0
    candidates_correct: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def oracle_teacher(traces: list[OracleTrace]) -> Teacher:
    """Teacher that always answers with the example's oracle trace."""
    by_id = {t.example_id: t.text for t in traces}

    def teach(example: Example, rng: np.random.Generator) -> str:
        return by_id[example.id]

    return teach


def policy_teacher(
    params: policy.PolicyParams, vocab: Vocab, gen_cfg: GenConfig
) -> Teacher:
    """Teacher that samples from a local policy on the train prompt."""

    def teach(example: Example, rng: np.random.Generator) -> str:
        prompt = render_prompt(example, "train")
        episode = generate(params, vocab, prompt, gen_cfg, rng)
        return vocab.decode(episode.response)

    return teach


def transcript_teacher(transcripts: dict[str, list[str]]) -> Teacher:
    """Teacher replaying recorded candidate texts, consumed in call order."""
    cursors: dict[str, int] = {}

    def teach(example: Example, rng: np.random.Generator) -> str:
        recorded = transcripts[example.id]
        i = cursors.get(example.id, 0)
        cursors[example.id] = i + 1
        return recorded[i % len(recorded)]

    return teach


def distill(
    teacher: Teacher,
    examples: list[Example],
    k: int,
    cfg: DistillConfig,
    vocab: Vocab,
) -> tuple[list[SftItem], DistillStats]:
    """Rejection-sample k candidates per example; keep verified-correct ones.

    Retained candidates are deduped and capped at keep_per_example, shortest
    first. Examples with no correct candidate are dropped and counted.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    stats = DistillStats(total_examples=len(examples))
    corpus: list[SftItem] = []
    for example in examples:
        candidates = []
        for j in range(k):
            rng = derive_rng(cfg.seed, "distill", example.id, j)
            try:
                candidates.append(teacher(example, rng))
            except Exception:
                stats.teacher_failures += 1
        stats.candidates_total += len(candidates)
        correct = [t for t in candidates if verifier.reward(t, example) == 1]
        stats.candidates_correct += len(correct)
        unique = list(dict.fromkeys(correct))
        retained = sorted(unique, key=len)[: cfg.keep_per_example]
        if not retained:
            stats.dropped_no_correct += 1
            continue
        prompt_ids = np.asarray(vocab.encode(render_prompt(example, "train")), np.int64)
        kept_any = False
        for text in retained:
            target = vocab.encode(text) + [vocab.eos_id]
            room = cfg.max_seq_len - len(prompt_ids)
            if room < len(target):
                target = target[: max(0, room)]
            if not target:
                continue
            target = np.asarray(target, dtype=np.int64)
            corpus.append(
                SftItem(
                    example_id=example.id,
                    prompt=prompt_ids,
                    target=target,
                    mask=np.ones(len(target), dtype=bool),
                )
            )
            kept_any = True
            stats.retained_targets += 1
        if kept_any:
            stats.retained_examples += 1
    return corpus, stats


def sft_loss(params: policy.PolicyParams, corpus: list[SftItem]) -> float:
    """Mean masked negative log-likelihood per target token over the corpus."""
    if not corpus:
        raise InputError("corpus is empty")
    logprobs = policy.many_sequence_logprobs(
        params, [(it.prompt, it.target) for it in corpus]
    )
    total = sum(int(it.mask.sum()) for it in corpus)
    if total == 0:
        raise InputError("corpus has no masked tokens")
    return float(-sum(lp[it.mask].sum() for lp, it in zip(logprobs, corpus)) / total)


def sft_train(
    params: policy.PolicyParams,
    corpus: list[SftItem],
    cfg: SftConfig,
) -> tuple[policy.PolicyParams, list[dict]]:
    """AdamW on masked cross-entropy with per-epoch multiplicative lr decay.

    Returns the trained params plus one log record per epoch (loss over the
    full corpus after that epoch).
    """
    if not corpus:
        raise InputError("corpus is empty")
    opt = policy.OptimizerState.init(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        scale = policy.lr_schedule("sft-decay", 0, 0, epoch=epoch, decay=cfg.lr_decay)
        order = derive_rng(cfg.seed, "sft-shuffle", epoch).permutation(len(corpus))
        for start in range(0, len(corpus), cfg.batch_size):
            batch = [corpus[i] for i in order[start : start + cfg.batch_size]]
            total = sum(int(it.mask.sum()) for it in batch)
            if total == 0:
                continue
            weights = [
                np.where(it.mask, -1.0 / total, 0.0) for it in batch
            ]
            grad = policy.accumulate_grad(
                params, [(it.prompt, it.target) for it in batch], weights
            )
            policy.adamw_step(params, grad, opt, lr_scale=scale)
        loss = sft_loss(params, corpus)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite SFT loss at epoch {epoch}")
        log.append({"epoch": epoch, "loss": loss, "lr_scale": scale})
    return params, log
