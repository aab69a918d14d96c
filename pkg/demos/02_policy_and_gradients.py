"""The tiny policy and its exact training mechanics.

The policy encodes the last k tokens one-hot, runs them through a two-layer
tanh network, and exposes exact per-token log-probabilities. The gradient
contract is a weighted sum of log-probabilities; this demo checks it against
central finite differences, then shows AdamW, clipping, and the schedules.
"""

import numpy as np

from xrlab import policy
from xrlab.tokens import Vocab

vocab = Vocab.default()
arch = policy.Arch(context=6, hidden=16, vocab_size=vocab.size)
params = policy.PolicyParams.init(arch, seed=0)
print(f"architecture: k={arch.context} h={arch.hidden} V={arch.vocab_size}"
      f" ({arch.param_count} parameters)")

prompt = np.asarray(vocab.encode("Compute 3+4."), np.int64)
response = np.asarray(vocab.encode("<think>3+4=07</think>"), np.int64)
logprobs = policy.sequence_logprobs(params, prompt, response)
print(f"response logprobs: first={logprobs[0]:.4f} sum={logprobs.sum():.4f}")

# gradient of L = sum_t w_t * logprob_t, checked against finite differences
# on a handful of randomly chosen coordinates
rng = np.random.default_rng(1)
weights = rng.normal(size=len(response))
grad = policy.accumulate_grad(params, [(prompt, response)], [weights])


def loss(p):
    return float((weights * policy.sequence_logprobs(p, prompt, response)).sum())


worst = 0.0
for _ in range(20):
    name = rng.choice(list(params.tensors))
    t = params.tensors[name]
    idx = tuple(rng.integers(0, s) for s in t.shape)
    h = 1e-4 * max(1.0, abs(t[idx]))
    orig = t[idx]
    t[idx] = orig + h
    up = loss(params)
    t[idx] = orig - h
    down = loss(params)
    t[idx] = orig
    fd = (up - down) / (2 * h)
    worst = max(worst, abs(fd - grad[name][idx]) / max(abs(fd), 1e-8))
print(f"finite-difference check on 20 random coordinates: max rel err {worst:.2e}")

# AdamW with decoupled weight decay, refused on non-finite gradients
opt = policy.OptimizerState.init(params, lr=1e-3, weight_decay=0.01)
before = params["b2"].copy()
policy.adamw_step(params, grad, opt)
print(f"adamw step moved b2 by {np.abs(params['b2'] - before).max():.2e}")

big = {n: g * 100 for n, g in grad.items()}
clipped = policy.clip_grad_norm(big, 1.0)
print(f"clip: norm {policy.grad_global_norm(big):.2f} -> {policy.grad_global_norm(clipped):.6f}")

print("warmup multiplier at 5% of steps:", policy.lr_schedule("warmup", 50, 1000))
print("per-epoch decay at epoch 2:", policy.lr_schedule("sft-decay", 0, 0, epoch=2))
