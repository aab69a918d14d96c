from __future__ import annotations

import numpy as np
import pytest

from xrlab import policy
from xrlab.tokens import Vocab


@pytest.fixture(scope="session")
def vocab() -> Vocab:
    return Vocab.default()


@pytest.fixture
def tiny_arch(vocab) -> policy.Arch:
    return policy.Arch(context=6, hidden=12, vocab_size=vocab.size)


def adversarial_params(arch: policy.Arch, vocab: Vocab, seed: int = 0) -> policy.PolicyParams:
    """Policy that never emits EOS or </think>: heavy negative output bias."""
    params = policy.PolicyParams.init(arch, seed=seed)
    params.tensors["b2"][vocab.eos_id] = -1e9
    params.tensors["b2"][vocab.end_think_id] = -1e9
    return params


def finite_difference_grad(loss_fn, params: policy.PolicyParams, rel_step: float = 1e-4):
    """Central finite differences of loss_fn over every parameter."""
    grads = {}
    for name, t in params.tensors.items():
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = t[idx]
            h = rel_step * max(1.0, abs(orig))
            t[idx] = orig + h
            up = loss_fn(params)
            t[idx] = orig - h
            down = loss_fn(params)
            t[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-8) -> float:
    worst = 0.0
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
