from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import finite_difference_grad, max_relative_error
from xrlab import grpo, policy, verifier
from xrlab.errors import ConfigError, InputError, NumericError
from xrlab.genctl import Episode, GenConfig, generate_many
from xrlab.grpo import (
    GrpoConfig,
    RolloutGroup,
    batch_loss,
    group_advantages,
    kl_term,
    rl_train_loop,
    token_objective,
)
from xrlab.seeding import derive_rng
from xrlab.tasks import gen_arithmetic, render_prompt
from xrlab.tokens import Vocab


def test_group_advantages_hand_cases():
    assert np.allclose(group_advantages([1, 0, 0, 1]), [1, -1, -1, 1], atol=1e-12)
    assert np.array_equal(group_advantages([1, 1, 1, 1]), np.zeros(4))
    got = group_advantages([1, 0, 0, 0])
    assert np.allclose(got, [1.7321, -0.5774, -0.5774, -0.5774], atol=1e-4)


def test_group_advantages_requires_group():
    with pytest.raises(ConfigError):
        group_advantages([1.0])


def test_group_advantages_normalization_property():
    rng = np.random.default_rng(0)
    for _ in range(500):
        g = int(rng.integers(2, 12))
        rewards = rng.integers(0, 2, size=g).astype(float)
        if np.all(rewards == rewards[0]):
            assert np.array_equal(group_advantages(rewards), np.zeros(g))
            continue
        adv = group_advantages(rewards)
        assert abs(adv.mean()) <= 1e-12
        assert abs(adv.std() - 1.0) <= 1e-9


def test_token_objective_hand_cases():
    assert float(token_objective(1.0, 1.0, 0.2, 0.2)) == pytest.approx(1.0, abs=1e-12)
    assert float(token_objective(1.5, 1.0, 0.2, 0.2)) == pytest.approx(1.2, abs=1e-12)
    assert float(token_objective(0.5, -1.0, 0.2, 0.2)) == pytest.approx(-0.8, abs=1e-12)


def test_token_objective_clip_higher_is_asymmetric():
    assert float(token_objective(1.25, 1.0, 0.2, 0.28)) == pytest.approx(1.25, abs=1e-12)
    assert float(token_objective(1.5, 1.0, 0.2, 0.28)) == pytest.approx(1.28, abs=1e-12)


def test_token_objective_min_property():
    rng = np.random.default_rng(1)
    ratios = np.exp(rng.normal(scale=1.0, size=2000))
    advs = rng.normal(size=2000) * 2
    eps_low = rng.uniform(0, 0.5, size=2000)
    eps_high = eps_low + rng.uniform(0, 0.5, size=2000)
    for rho, adv, el, eh in zip(ratios, advs, eps_low, eps_high):
        assert float(token_objective(rho, adv, el, eh)) <= rho * adv + 1e-12


def test_token_objective_rejects_nonpositive_ratio():
    with pytest.raises(InputError):
        token_objective(0.0, 1.0, 0.2, 0.2)


def test_kl_term_hand_cases():
    assert float(kl_term(1.0)) == 0.0
    assert float(kl_term(2.0)) == pytest.approx(2 - math.log(2) - 1, abs=1e-12)
    assert float(kl_term(2.0)) == pytest.approx(0.3069, abs=1e-4)
    assert float(kl_term(0.5)) == pytest.approx(0.5 - math.log(0.5) - 1, abs=1e-12)
    assert float(kl_term(0.5)) == pytest.approx(0.1931, abs=1e-4)


def test_kl_term_nonnegative_zero_iff_one():
    rng = np.random.default_rng(2)
    ratios = np.exp(rng.normal(size=1000))
    values = kl_term(ratios)
    assert np.all(values >= 0)
    assert np.all((values == 0) == (ratios == 1.0))
    with pytest.raises(NumericError):
        kl_term(-0.1)


# --- batch loss ---


def _episode(vocab, prompt_text, tokens, logprob_params, injected=None):
    prompt = np.asarray(vocab.encode(prompt_text), np.int64)
    response = np.asarray(tokens, np.int64)
    lps = policy.sequence_logprobs(logprob_params, prompt, response)
    return Episode(
        prompt=prompt,
        response=response,
        logprobs=lps,
        termination="forced-exit" if injected is not None else "natural-eos",
        injected_exit_position=injected,
    )


def _toy_groups(vocab, params_roll, params_ref, rewards_per_group, lengths, seed=0):
    """Groups with episodes sampled-ish from params_roll, refs from params_ref."""
    from xrlab.tasks import gen_arithmetic

    examples, _ = gen_arithmetic(seed=seed, n=len(rewards_per_group), max_digits=1)
    rng = np.random.default_rng(seed)
    groups = []
    for ex, rewards, lens in zip(examples, rewards_per_group, lengths):
        episodes = [
            _episode(vocab, ex.question, rng.integers(0, vocab.size, n), params_roll)
            for n in lens
        ]
        rewards = np.asarray(rewards, float)
        groups.append(
            RolloutGroup(
                example=ex,
                episodes=episodes,
                rewards=rewards,
                advantages=group_advantages(rewards),
                old_logprobs=[e.logprobs for e in episodes],
                ref_logprobs=policy.many_sequence_logprobs(
                    params_ref, [(e.prompt, e.response) for e in episodes]
                ),
            )
        )
    return groups


@pytest.fixture
def toy_setup(vocab):
    arch = policy.Arch(context=4, hidden=6, vocab_size=vocab.size)
    params = policy.PolicyParams.init(arch, seed=3)
    rolled = policy.PolicyParams.init(arch, seed=4)
    ref = policy.PolicyParams.init(arch, seed=5)
    return params, rolled, ref


def test_batch_loss_zero_advantages_zero_beta(vocab, toy_setup):
    params, rolled, ref = toy_setup
    groups = _toy_groups(vocab, rolled, ref, [[1, 1], [0, 0]], [[3, 4], [2, 5]])
    cfg = GrpoConfig(group_size=2, kl_coef=0.0)
    result = batch_loss(groups, params, cfg)
    assert result.loss == 0.0
    assert all(np.all(w == 0.0) for w in result.weights)


def test_batch_loss_norm_modes_agree_on_equal_lengths(vocab, toy_setup):
    params, rolled, ref = toy_setup
    groups = _toy_groups(vocab, rolled, ref, [[1, 0], [0, 1]], [[4, 4], [4, 4]])
    token = batch_loss(groups, params, GrpoConfig(group_size=2, loss_norm="token-level"))
    seq = batch_loss(groups, params, GrpoConfig(group_size=2, loss_norm="sequence-level"))
    assert token.loss == pytest.approx(seq.loss, abs=1e-12)
    for wt, ws in zip(token.weights, seq.weights):
        assert np.allclose(wt, ws, atol=1e-15)


def test_batch_loss_norm_modes_differ_on_unequal_lengths(vocab, toy_setup):
    params, rolled, ref = toy_setup
    groups = _toy_groups(vocab, rolled, ref, [[1, 0]], [[2, 6]])
    token = batch_loss(groups, params, GrpoConfig(group_size=2, loss_norm="token-level"))
    seq = batch_loss(groups, params, GrpoConfig(group_size=2, loss_norm="sequence-level"))
    assert abs(token.loss - seq.loss) > 1e-9
    # independent direct evaluation of both normalizations
    direct_token = 0.0
    direct_seq = 0.0
    g = groups[0]
    cfg = GrpoConfig(group_size=2)
    total = sum(len(e.response) for e in g.episodes)
    for ei, ep in enumerate(g.episodes):
        lp_new = policy.sequence_logprobs(params, ep.prompt, ep.response)
        ratio = np.exp(lp_new - g.old_logprobs[ei])
        obj = token_objective(ratio, g.advantages[ei], cfg.eps_low, cfg.eps_high)
        kl = kl_term(np.exp(g.ref_logprobs[ei] - lp_new))
        term = obj - cfg.kl_coef * kl
        direct_token += float(-term.sum() / total)
        direct_seq += float(-term.mean() / 2)
    assert token.loss == pytest.approx(direct_token, abs=1e-12)
    assert seq.loss == pytest.approx(direct_seq, abs=1e-12)


def test_batch_loss_weights_match_finite_differences(vocab, toy_setup):
    params, rolled, ref = toy_setup
    groups = _toy_groups(vocab, rolled, ref, [[1, 0, 0], [1, 1, 0]], [[3, 2, 4], [2, 2, 3]])
    for norm in ("token-level", "sequence-level"):
        for beta in (0.0, 1e-2):
            cfg = GrpoConfig(group_size=3, loss_norm=norm, kl_coef=beta)
            result = batch_loss(groups, params, cfg)
            analytic = policy.accumulate_grad(
                params,
                [(ep.prompt, ep.response) for g in groups for ep in g.episodes],
                result.weights,
            )
            numeric = finite_difference_grad(
                lambda p: batch_loss(groups, p, cfg).loss, params
            )
            assert max_relative_error(analytic, numeric) < 1e-3


def test_batch_loss_excludes_injected_tokens(vocab, toy_setup):
    params, rolled, ref = toy_setup
    ex, _ = gen_arithmetic(seed=1, n=1, max_digits=1)
    episodes = [
        _episode(vocab, ex[0].question, [7, 8, 9, 10], rolled, injected=2),
        _episode(vocab, ex[0].question, [7, 8, 9, 10], rolled),
    ]
    rewards = np.array([1.0, 0.0])
    group = RolloutGroup(
        example=ex[0],
        episodes=episodes,
        rewards=rewards,
        advantages=group_advantages(rewards),
        old_logprobs=[e.logprobs for e in episodes],
        ref_logprobs=policy.many_sequence_logprobs(
            ref, [(e.prompt, e.response) for e in episodes]
        ),
    )
    result = batch_loss([group], params, GrpoConfig(group_size=2))
    assert result.weights[0][2] == 0.0
    assert np.all(result.weights[0][[0, 1, 3]] != 0.0)
    assert result.n_tokens == 7


def test_beta_zero_leaves_surrogate_weights_unchanged(vocab, toy_setup):
    params, rolled, ref = toy_setup
    groups = _toy_groups(vocab, rolled, ref, [[1, 0]], [[3, 5]])
    base = batch_loss(groups, params, GrpoConfig(group_size=2, kl_coef=0.0))
    with_kl = batch_loss(groups, params, GrpoConfig(group_size=2, kl_coef=1e-2))
    for ei, (w0, w1) in enumerate(zip(base.weights, with_kl.weights)):
        lp_new = policy.sequence_logprobs(
            params, groups[0].episodes[ei].prompt, groups[0].episodes[ei].response
        )
        ratio_ref = np.exp(groups[0].ref_logprobs[ei] - lp_new)
        norm = 1.0 / base.n_tokens
        assert np.allclose(w1 - w0, 1e-2 * (1.0 - ratio_ref) * norm, atol=1e-15)


def test_grpo_reduces_to_vanilla_policy_gradient_at_identity_ratio(vocab):
    """With pi_old = pi_theta (ratio 1) and beta=0, the emitted weights are
    exactly -advantage * norm: the plain REINFORCE estimator."""
    arch = policy.Arch(context=4, hidden=6, vocab_size=vocab.size)
    params = policy.PolicyParams.init(arch, seed=7)
    groups = _toy_groups(vocab, params, params, [[1, 0, 1, 0]], [[3, 4, 2, 5]])
    cfg = GrpoConfig(group_size=4, kl_coef=0.0, eps_low=0.2, eps_high=0.2)
    result = batch_loss(groups, params, cfg)
    norm = 1.0 / result.n_tokens
    for ei, w in enumerate(result.weights):
        expected = -groups[0].advantages[ei] * norm
        assert np.allclose(w, expected, atol=1e-10)


def test_config_validation():
    with pytest.raises(ConfigError):
        GrpoConfig(group_size=1)
    with pytest.raises(ConfigError):
        GrpoConfig(eps_low=0.3, eps_high=0.2)
    with pytest.raises(ConfigError):
        GrpoConfig(eps_high=1.0)
    with pytest.raises(ConfigError):
        GrpoConfig(kl_coef=-1e-3)
    with pytest.raises(ConfigError):
        GrpoConfig(loss_norm="micro")


# --- training loop ---


def test_rl_loop_flat_rewards_do_not_move_params(vocab):
    """Zero-parameter policy never emits an answer block: every reward is 0,
    every group is degenerate, and with beta=0 the update must be exactly zero."""
    arch = policy.Arch(context=4, hidden=6, vocab_size=vocab.size)
    params = policy.PolicyParams.zeros(arch)
    before = {n: t.copy() for n, t in params.tensors.items()}
    train, _ = gen_arithmetic(seed=2, n=4, max_digits=1)
    cfg = GrpoConfig(
        group_size=2, batch_queries=2, kl_coef=0.0, lr=1e-2,
        max_response_tokens=8, think_budget=4, answer_budget=2,
        epochs=1, max_steps=2, seed=0,
    )
    params, metrics = rl_train_loop(params, vocab, train, cfg)
    assert all(m["reward_mean"] == 0.0 for m in metrics)
    for name in before:
        assert np.array_equal(params[name], before[name])


def test_rl_loop_metrics_schema(vocab):
    arch = policy.Arch(context=4, hidden=6, vocab_size=vocab.size)
    params = policy.PolicyParams.init(arch, seed=1)
    train, _ = gen_arithmetic(seed=3, n=4, max_digits=1)
    val, _ = gen_arithmetic(seed=4, n=3, max_digits=1)
    cfg = GrpoConfig(
        group_size=2, batch_queries=2, max_response_tokens=8,
        think_budget=4, answer_budget=2, epochs=1, max_steps=2, val_every=1, seed=0,
    )
    seen = []
    params, metrics = rl_train_loop(
        params, vocab, train, cfg, val_examples=val, on_step=seen.append
    )
    assert len(metrics) == 2
    for record in metrics:
        assert set(record) == set(grpo.METRIC_KEYS)
        assert record["val_acc"] is not None
    assert seen == metrics


def test_rl_loop_checkpoints_before_aborting(vocab, monkeypatch):
    arch = policy.Arch(context=4, hidden=6, vocab_size=vocab.size)
    params = policy.PolicyParams.init(arch, seed=1)
    train, _ = gen_arithmetic(seed=3, n=4, max_digits=1)
    cfg = GrpoConfig(
        group_size=2, batch_queries=2, max_response_tokens=8,
        think_budget=4, answer_budget=2, epochs=1, max_steps=2, seed=0,
    )
    calls = []

    def boom(*a, **k):
        raise RuntimeError("verifier exploded")

    monkeypatch.setattr(verifier, "reward", boom)
    with pytest.raises(RuntimeError):
        rl_train_loop(
            params, vocab, train, cfg,
            checkpoint_cb=lambda p, o, step, why: calls.append(why),
        )
    assert calls == ["abort"]


def test_rollout_old_logprobs_are_frozen_at_sampling_time(vocab):
    """Episodes record logprobs under the sampling snapshot; recomputing under
    it reproduces them exactly (the ratio's denominator in the objective)."""
    arch = policy.Arch(context=4, hidden=6, vocab_size=vocab.size)
    params = policy.PolicyParams.init(arch, seed=9)
    train, _ = gen_arithmetic(seed=5, n=2, max_digits=1)
    gen_cfg = GenConfig(temperature=1.0, max_response_tokens=8, think_budget=4, answer_budget=2)
    prompts = [render_prompt(e, "train") for e in train]
    episodes = generate_many(
        params, vocab, prompts, gen_cfg, [derive_rng(0, i) for i in range(2)]
    )
    for ep in episodes:
        again = policy.sequence_logprobs(params, ep.prompt, ep.response)
        assert np.allclose(ep.logprobs, again, atol=1e-12)
