"""Stage 1: rejection-sampling distillation and supervised fine-tuning.

Distills a verified corpus from the oracle teacher, then fine-tunes the
policy on single-digit addition. Ends with greedy samples from the tuned
model. Takes roughly half a minute on a laptop core.
"""

import numpy as np

from xrlab import policy, sft
from xrlab.genctl import GenConfig, generate
from xrlab.grpo import greedy_accuracy
from xrlab.tasks import gen_arithmetic, render_prompt
from xrlab.tokens import Vocab

vocab = Vocab.default()
train, traces = gen_arithmetic(seed=1, n=800, max_digits=1, ops=("+",))
val, _ = gen_arithmetic(seed=2, n=100, max_digits=1, ops=("+",))

# rejection sampling: k candidates per example, keep verified-correct ones;
# with the oracle teacher every candidate verifies, so nothing is dropped
corpus, stats = sft.distill(sft.oracle_teacher(traces), train, 1, sft.DistillConfig(seed=0), vocab)
print(f"distilled {stats.retained_targets} targets, dropped {stats.dropped_no_correct}")

arch = policy.Arch(context=16, hidden=64, vocab_size=vocab.size)
params = policy.PolicyParams.init(arch, seed=0)
print(f"loss before training: {sft.sft_loss(params, corpus):.3f}"
      f" (uniform would be {np.log(vocab.size):.3f})")

params, log = sft.sft_train(
    params, corpus, sft.SftConfig(epochs=4, lr=6e-3, batch_size=2, seed=0)
)
for record in log:
    print(f"epoch {record['epoch']}: loss {record['loss']:.4f} (lr x{record['lr_scale']:.2f})")

gen_cfg = GenConfig(temperature=0.0, max_response_tokens=40, think_budget=28, answer_budget=10)
acc = greedy_accuracy(params, vocab, val, gen_cfg, "train")
print(f"greedy validation accuracy: {acc:.2%}")

for ex in val[:3]:
    episode = generate(params, vocab, render_prompt(ex, "train"), gen_cfg, None)
    print(f"{ex.question:15s} gold={ex.gold_answer:3s} model={vocab.decode(episode.response)}")
