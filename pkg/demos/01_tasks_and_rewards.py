"""Verifiable tasks, prompt templates, and the binary reward.

Generates both task families, shows how prompts are rendered for training
and evaluation, and walks through answer extraction and normalization.
"""

from xrlab import verifier
from xrlab.tasks import (
    gen_arithmetic,
    gen_contextual_mcq,
    mask_context,
    render_prompt,
)

# Arithmetic: fixed-width operands, exact integer golds, and an oracle trace
# that decomposes the computation place by place.
examples, traces = gen_arithmetic(seed=7, n=3, max_digits=2, ops=("+", "*"))
for ex, trace in zip(examples, traces):
    print(f"{ex.question:22s} gold={ex.gold_answer:8s} trace={trace.text}")

print()
print("--- training prompt for the first example ---")
print(render_prompt(examples[0], "train"))

# Contextual MCQ: the needed fact lives in a maskable context channel. A
# seeded fraction is "planted" so the question alone already states the fact.
mcq, mcq_traces = gen_contextual_mcq(seed=7, n=2, n_options=4)
print()
print("--- evaluation prompt for a contextual MCQ ---")
print(render_prompt(mcq[0], "mcq"))
print()
print("same question with the context masked:")
print(render_prompt(mask_context(mcq[0]), "mcq"))

# The reward is 1 iff the last <answer> block matches the gold under the
# kind's normalization; formatting sloppiness that normalization covers
# (commas, leading zeros, letter-plus-text answers) still verifies.
ex = examples[0]
print()
for text in (
    traces[0].text,
    f"<think>rough</think><answer>{int(ex.gold_answer):,}</answer>",
    f"<think>rough</think><answer>00{ex.gold_answer}</answer>",
    "the answer is right but there is no tag",
):
    print(f"reward={verifier.reward(text, ex)} for {text!r}")

print()
print("mcq normalization:", verifier.normalize("B: No", "mcq"), "| numeric:", verifier.normalize("1,200", "numeric"))
