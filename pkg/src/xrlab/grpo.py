"""Stage 2: group-relative policy optimization with verifiable rewards.

Advantages normalize each episode's binary reward against its query group
(population standard deviation; an all-equal group yields all-zero
advantages). The per-token objective is the clipped surrogate
min(ratio * adv, clip(ratio, 1-eps_low, 1+eps_high) * adv) minus an optional
KL penalty against a reference policy frozen at loop start, estimated per
token as r - ln r - 1 with r = pi_ref / pi_theta.

Loss normalization is either sequence-level (mean over tokens per episode,
then over episodes and groups) or token-level (one division by the batch's
total non-injected response token count). Tokens injected by forced exit
never carry loss: the policy did not choose them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import policy, verifier
from .errors import ConfigError, InputError, NumericError, TrainingError
from .genctl import (
    CLIPPED_TERMINATIONS,
    Episode,
    GenConfig,
    generate_many,
    loss_mask,
)
from .seeding import derive_rng
from .tasks import Example, render_prompt
from .tokens import Vocab

TOKEN_LEVEL = "token-level"
SEQUENCE_LEVEL = "sequence-level"

METRIC_KEYS = (
    "step",
    "reward_mean",
    "pg_loss",
    "kl_mean",
    "adv_mean",
    "mean_resp_len",
    "clip_ratio",
    "val_acc",
)


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    eps_low: float = 0.2
    eps_high: float = 0.2
    kl_coef: float = 1e-2
    lr: float = 3e-6
    batch_queries: int = 16
    temperature: float = 1.0
    max_response_tokens: int = 4096
    think_budget: int = 96
    answer_budget: int = 64
    loss_norm: str = TOKEN_LEVEL
    epochs: int = 3
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    max_steps: int | None = None
    val_every: int = 10
    seed: int = 0
    degenerate_group_policy: str = "zero-advantages"
    std_mode: str = "population"

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not 0.0 <= self.eps_low <= self.eps_high < 1.0:
            raise ConfigError("need 0 <= eps_low <= eps_high < 1")
        if self.kl_coef < 0:
            raise ConfigError("kl_coef must be >= 0")
        if self.loss_norm not in (TOKEN_LEVEL, SEQUENCE_LEVEL):
            raise ConfigError(f"unknown loss_norm: {self.loss_norm!r}")
        if self.degenerate_group_policy != "zero-advantages":
            raise ConfigError("only zero-advantages degenerate policy is supported")
        if self.std_mode != "population":
            raise ConfigError("only population std is supported")
        if self.batch_queries < 1:
            raise ConfigError("batch_queries must be >= 1")


@dataclass
class RolloutGroup:
    """G episodes for one query with rewards, advantages and frozen logprobs."""

    example: Example
    episodes: list[Episode]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logprobs: list[np.ndarray]
    ref_logprobs: list[np.ndarray]

    def __post_init__(self):
        g = len(self.episodes)
        if g < 2:
            raise ConfigError("a rollout group needs at least 2 episodes")
        if not (len(self.rewards) == len(self.advantages) == g):
            raise InputError("rewards/advantages must have one entry per episode")
        for ep, old, ref in zip(self.episodes, self.old_logprobs, self.ref_logprobs):
            if len(old) != len(ep.response) or len(ref) != len(ep.response):
                raise InputError("logprob arrays must align with response tokens")


def group_advantages(rewards) -> np.ndarray:
    """(r_i - mean(r)) / population_std(r); all zeros when the group is flat."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ConfigError("group_advantages needs a flat list of >= 2 rewards")
    if np.all(r == r[0]):
        return np.zeros(len(r))
    std = r.std()
    return (r - r.mean()) / std


def token_objective(ratio, adv, eps_low: float, eps_high: float):
    """min(ratio * adv, clip(ratio, 1-eps_low, 1+eps_high) * adv), elementwise."""
    ratio = np.asarray(ratio, dtype=np.float64)
    if np.any(ratio <= 0):
        raise InputError("probability ratio must be positive")
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * adv)


def kl_term(ratio_ref):
    """Nonnegative per-token KL estimate r - ln(r) - 1 for r = pi_ref/pi_theta."""
    r = np.asarray(ratio_ref, dtype=np.float64)
    if np.any(r <= 0):
        raise NumericError("reference ratio must be positive")
    return r - np.log(r) - 1.0


@dataclass
class BatchLossResult:
    loss: float
    weights: list[np.ndarray]  # d loss / d logprob per response token, episode order
    pg_loss: float
    kl_mean: float
    n_tokens: int


def batch_loss(
    groups: list[RolloutGroup], params: policy.PolicyParams, cfg: GrpoConfig
) -> BatchLossResult:
    """Scalar loss plus analytic d loss/d logprob weights for accumulate_grad.

    Surrogate branch derivative is -ratio*adv*norm where the unclipped branch
    attains the min (ties included), 0 where the clipped branch does; the KL
    derivative is kl_coef*(1 - ratio_ref)*norm. Episodes with no loss-carrying
    tokens contribute nothing.
    """
    masks = [[loss_mask(ep) for ep in g.episodes] for g in groups]
    total_tokens = sum(int(m.sum()) for ms in masks for m in ms)
    new_logprobs = [
        policy.many_sequence_logprobs(
            params, [(ep.prompt, ep.response) for ep in g.episodes]
        )
        for g in groups
    ]

    loss = 0.0
    pg_loss = 0.0
    kl_sum = 0.0
    weights: list[np.ndarray] = []
    for gi, group in enumerate(groups):
        for ei, ep in enumerate(group.episodes):
            mask = masks[gi][ei]
            n_i = int(mask.sum())
            w = np.zeros(len(ep.response))
            if n_i == 0:
                weights.append(w)
                continue
            if cfg.loss_norm == TOKEN_LEVEL:
                norm = 1.0 / total_tokens
            else:
                norm = 1.0 / (len(groups) * len(group.episodes) * n_i)
            lp_new = new_logprobs[gi][ei][mask]
            lp_old = np.asarray(group.old_logprobs[ei])[mask]
            lp_ref = np.asarray(group.ref_logprobs[ei])[mask]
            ratio = np.exp(lp_new - lp_old)
            if not np.all(np.isfinite(ratio)):
                raise TrainingError(
                    f"non-finite ratio in group {gi} (example {group.example.id})"
                )
            adv = group.advantages[ei]
            unclipped = ratio * adv
            clipped = np.clip(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * adv
            obj = np.minimum(unclipped, clipped)
            ratio_ref = np.exp(lp_ref - lp_new)
            if not np.all(np.isfinite(ratio_ref)):
                raise TrainingError(
                    f"non-finite reference ratio in group {gi} "
                    f"(example {group.example.id})"
                )
            kl = kl_term(ratio_ref)
            loss += float(-(norm * (obj - cfg.kl_coef * kl)).sum())
            pg_loss += float(-(norm * obj).sum())
            kl_sum += float(kl.sum())
            w[mask] = norm * (
                -unclipped * (unclipped <= clipped) + cfg.kl_coef * (1.0 - ratio_ref)
            )
            weights.append(w)
    if not math.isfinite(loss):
        raise TrainingError("non-finite batch loss")
    kl_mean = kl_sum / total_tokens if total_tokens else 0.0
    return BatchLossResult(
        loss=loss, weights=weights, pg_loss=pg_loss, kl_mean=kl_mean, n_tokens=total_tokens
    )


def greedy_accuracy(
    params: policy.PolicyParams,
    vocab: Vocab,
    examples: list[Example],
    gen_cfg: GenConfig,
    template_kind: str = "train",
) -> float:
    """Greedy-decode reward rate; used for periodic validation scoring."""
    if not examples:
        raise InputError("no examples to score")
    cfg = replace(gen_cfg, temperature=0.0)
    prompts = [render_prompt(ex, template_kind) for ex in examples]
    episodes = generate_many(params, vocab, prompts, cfg, None)
    hits = sum(
        verifier.reward(vocab.decode(ep.response), ex)
        for ep, ex in zip(episodes, examples)
    )
    return hits / len(examples)


def rl_train_loop(
    params: policy.PolicyParams,
    vocab: Vocab,
    train_examples: list[Example],
    cfg: GrpoConfig,
    *,
    val_examples: list[Example] | None = None,
    template_kind: str = "train",
    on_step: Callable[[dict], None] | None = None,
    checkpoint_cb: Callable[[policy.PolicyParams, policy.OptimizerState, int, str], None]
    | None = None,
    checkpoint_every: int = 0,
) -> tuple[policy.PolicyParams, list[dict]]:
    """GRPO training loop: snapshot, roll out G per query, score, one step.

    The reference policy is frozen at loop start; the old policy is the
    parameter state at each step's rollout time (one inner update per
    snapshot). A batch whose loss weights are all exactly zero skips the
    optimizer update entirely, so flat-reward batches change nothing.
    Raising anywhere checkpoints first when a callback is provided.
    """
    if not train_examples:
        raise InputError("empty training dataset")
    gen_cfg = GenConfig(
        temperature=cfg.temperature,
        max_response_tokens=cfg.max_response_tokens,
        think_budget=cfg.think_budget,
        answer_budget=cfg.answer_budget,
        seed=cfg.seed,
    )
    ref = params.snapshot("reference")
    opt = policy.OptimizerState.init(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_examples) / cfg.batch_queries)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    prompt_of = {ex.id: render_prompt(ex, template_kind) for ex in train_examples}
    val_acc = (
        greedy_accuracy(params, vocab, val_examples, gen_cfg, template_kind)
        if val_examples
        else None
    )
    metrics: list[dict] = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = derive_rng(cfg.seed, "rl-shuffle", epoch).permutation(
                len(train_examples)
            )
            for start in range(0, len(train_examples), cfg.batch_queries):
                if step >= total_steps:
                    break
                step += 1
                batch = [train_examples[i] for i in order[start : start + cfg.batch_queries]]
                old = params.snapshot("old")

                prompts, rngs = [], []
                for ex in batch:
                    for i in range(cfg.group_size):
                        prompts.append(prompt_of[ex.id])
                        rngs.append(derive_rng(cfg.seed, "rollout", step, ex.id, i))
                episodes = generate_many(old.params, vocab, prompts, gen_cfg, rngs)
                ref_lps = policy.many_sequence_logprobs(
                    ref.params, [(ep.prompt, ep.response) for ep in episodes]
                )

                groups = []
                g = cfg.group_size
                for qi, ex in enumerate(batch):
                    eps = episodes[qi * g : (qi + 1) * g]
                    rewards = np.asarray(
                        [verifier.reward(vocab.decode(e.response), ex) for e in eps],
                        dtype=np.float64,
                    )
                    groups.append(
                        RolloutGroup(
                            example=ex,
                            episodes=eps,
                            rewards=rewards,
                            advantages=group_advantages(rewards),
                            old_logprobs=[e.logprobs for e in eps],
                            ref_logprobs=ref_lps[qi * g : (qi + 1) * g],
                        )
                    )

                result = batch_loss(groups, params, cfg)
                if any(w.any() for w in result.weights):
                    grad = policy.accumulate_grad(
                        params,
                        [(ep.prompt, ep.response) for ep in episodes],
                        result.weights,
                    )
                    grad = policy.clip_grad_norm(grad, cfg.grad_clip)
                    policy.adamw_step(
                        params, grad, opt,
                        lr_scale=policy.lr_schedule("warmup", step, total_steps),
                    )

                if val_examples and (step % cfg.val_every == 0 or step == total_steps):
                    val_acc = greedy_accuracy(
                        params, vocab, val_examples, gen_cfg, template_kind
                    )
                record = {
                    "step": step,
                    "reward_mean": float(np.mean([g_.rewards.mean() for g_ in groups])),
                    "pg_loss": result.pg_loss,
                    "kl_mean": result.kl_mean,
                    "adv_mean": float(
                        np.mean([a for g_ in groups for a in g_.advantages])
                    ),
                    "mean_resp_len": float(np.mean([len(e.response) for e in episodes])),
                    "clip_ratio": float(
                        np.mean(
                            [e.termination in CLIPPED_TERMINATIONS for e in episodes]
                        )
                    ),
                    "val_acc": val_acc,
                }
                metrics.append(record)
                if on_step is not None:
                    on_step(record)
                if checkpoint_cb is not None and checkpoint_every and step % checkpoint_every == 0:
                    checkpoint_cb(params, opt, step, "periodic")
    except BaseException:
        if checkpoint_cb is not None:
            checkpoint_cb(params, opt, step, "abort")
        raise
    return params, metrics
