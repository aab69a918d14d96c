"""xrlab: desk-scale text-only reasoning post-training laboratory.

Pipeline: seeded verifiable task generation -> rejection-sampling CoT
distillation -> SFT -> GRPO with verifiable rewards -> evaluation protocol
(greedy, average, majority-vote, pass@n) over local policies or remote
chat-completion endpoints.
"""

__version__ = "0.1.0"
