"""Tiny differentiable autoregressive policy with exact gradients.

Architecture (the fixed reference design): one-hot encoding of the last
``context`` tokens -> affine -> tanh -> affine -> logits. Prefix positions
before the start of the sequence contribute nothing (zero feature vector).

Everything runs in float64 numpy. Parameters live in a flat name->tensor
mapping so the optimizer, gradient clipping, checkpointing and
finite-difference checks can stay generic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, TrainingError

# Positions processed per forward/backward chunk; bounds peak memory at
# roughly chunk * context * hidden floats.
_CHUNK = 4096

MAX_PARAM_COUNT = 1_000_000


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor: context window k, hidden width h, vocab size V."""

    context: int = 16
    hidden: int = 64
    vocab_size: int = 0

    def __post_init__(self):
        if self.context < 1 or self.hidden < 1 or self.vocab_size < 1:
            raise ConfigError("arch dimensions must be positive")

    @property
    def feature_dim(self) -> int:
        return self.context * self.vocab_size

    @property
    def param_count(self) -> int:
        h, v = self.hidden, self.vocab_size
        return self.feature_dim * h + h + h * v + v

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        h, v = self.hidden, self.vocab_size
        return {
            "w1": (self.feature_dim, h),
            "b1": (h,),
            "w2": (h, v),
            "b2": (v,),
        }


class PolicyParams:
    """Named float64 parameter tensors of the policy."""

    def __init__(self, arch: Arch, tensors: dict[str, np.ndarray]):
        shapes = arch.tensor_shapes()
        if set(tensors) != set(shapes):
            raise InputError(f"tensor names {sorted(tensors)} != {sorted(shapes)}")
        if arch.param_count > MAX_PARAM_COUNT:
            raise InputError(
                f"parameter count {arch.param_count} exceeds {MAX_PARAM_COUNT}"
            )
        checked = {}
        for name, shape in shapes.items():
            t = np.asarray(tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise InputError(f"tensor {name}: shape {t.shape} != {shape}")
            if not np.all(np.isfinite(t)):
                raise InputError(f"tensor {name}: non-finite values")
            checked[name] = t
        self.arch = arch
        self.tensors = checked

    @classmethod
    def init(cls, arch: Arch, seed: int = 0, scale: float = 0.05) -> "PolicyParams":
        """Uniform initialization in [-scale, scale] from a seeded generator."""
        rng = np.random.default_rng(seed)
        tensors = {
            name: rng.uniform(-scale, scale, size=shape)
            for name, shape in arch.tensor_shapes().items()
        }
        return cls(arch, tensors)

    @classmethod
    def zeros(cls, arch: Arch) -> "PolicyParams":
        return cls(arch, {n: np.zeros(s) for n, s in arch.tensor_shapes().items()})

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, {n: t.copy() for n, t in self.tensors.items()})

    def snapshot(self, role: str) -> "PolicySnapshot":
        return PolicySnapshot.of(self, role)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


@dataclass(frozen=True)
class PolicySnapshot:
    """Frozen copy of PolicyParams with a role tag (old | reference)."""

    params: PolicyParams
    role: str

    ROLES = ("old", "reference")

    @classmethod
    def of(cls, params: PolicyParams, role: str) -> "PolicySnapshot":
        if role not in cls.ROLES:
            raise InputError(f"snapshot role must be one of {cls.ROLES}: {role}")
        frozen = params.copy()
        for t in frozen.tensors.values():
            t.setflags(write=False)
        return cls(params=frozen, role=role)


# --- forward pass ---


def response_windows(
    context: int, prompt: np.ndarray, response: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Last-k token windows preceding each response position.

    Returns (windows, valid): windows is (T, k) int64 with -1 at positions
    before sequence start, valid is the corresponding boolean mask.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    response = np.asarray(response, dtype=np.int64)
    full = np.concatenate([prompt, response])
    padded = np.concatenate([np.full(context, -1, dtype=np.int64), full])
    all_windows = np.lib.stride_tricks.sliding_window_view(padded, context)
    windows = all_windows[len(prompt) : len(prompt) + len(response)].copy()
    return windows, windows >= 0


def prefix_window(context: int, prefix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single (1, k) window for the next-token prediction after ``prefix``."""
    prefix = np.asarray(prefix, dtype=np.int64)
    tail = prefix[-context:] if len(prefix) else prefix
    window = np.full((1, context), -1, dtype=np.int64)
    if len(tail):
        window[0, context - len(tail) :] = tail
    return window, window >= 0


def _forward(
    params: PolicyParams, windows: np.ndarray, valid: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Hidden activations and logits for a (N, k) batch of windows."""
    arch = params.arch
    v = arch.vocab_size
    offsets = (np.arange(arch.context, dtype=np.int64) * v)[None, :]
    flat = offsets + np.where(valid, windows, 0)
    gathered = params["w1"][flat]
    gathered *= valid[..., None]
    z = np.tanh(gathered.sum(axis=1) + params["b1"])
    return z, z @ params["w2"] + params["b2"]


def logits(params: PolicyParams, prefix) -> np.ndarray:
    """Next-token logits conditioned on the last min(len, k) prefix tokens."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.size and (prefix.min() < 0 or prefix.max() >= params.arch.vocab_size):
        raise InputError("prefix token index out of range")
    window, valid = prefix_window(params.arch.context, prefix)
    _, out = _forward(params, window, valid)
    return out[0]


def batch_logits(params: PolicyParams, windows: np.ndarray, valid: np.ndarray) -> np.ndarray:
    _, out = _forward(params, windows, valid)
    return out


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    p = np.exp(x - x.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    return p


def _validate_sequence(params: PolicyParams, prompt, response) -> tuple[np.ndarray, np.ndarray]:
    prompt = np.asarray(prompt, dtype=np.int64)
    response = np.asarray(response, dtype=np.int64)
    v = params.arch.vocab_size
    for arr, what in ((prompt, "prompt"), (response, "response")):
        if arr.size and (arr.min() < 0 or arr.max() >= v):
            raise InputError(f"{what} token index out of range")
    return prompt, response


def sequence_logprobs(params: PolicyParams, prompt, response) -> np.ndarray:
    """Per-token log-probabilities of ``response`` given ``prompt``.

    Entry t is log softmax(logits(prompt + response[:t]))[response[t]].
    Empty response yields an empty array.
    """
    prompt, response = _validate_sequence(params, prompt, response)
    if len(response) == 0:
        return np.zeros(0)
    out = np.empty(len(response))
    windows, valid = response_windows(params.arch.context, prompt, response)
    for start in range(0, len(response), _CHUNK):
        sl = slice(start, start + _CHUNK)
        lp = log_softmax(batch_logits(params, windows[sl], valid[sl]))
        out[sl] = lp[np.arange(lp.shape[0]), response[sl]]
    return out


def many_sequence_logprobs(
    params: PolicyParams, sequences: list[tuple[np.ndarray, np.ndarray]]
) -> list[np.ndarray]:
    """sequence_logprobs over many (prompt, response) pairs in shared chunks."""
    win_parts, tgt_parts, lens = [], [], []
    for prompt, response in sequences:
        prompt, response = _validate_sequence(params, prompt, response)
        lens.append(len(response))
        if len(response) == 0:
            continue
        windows, _ = response_windows(params.arch.context, prompt, response)
        win_parts.append(windows)
        tgt_parts.append(response)
    if not win_parts:
        return [np.zeros(0) for _ in lens]
    windows = np.concatenate(win_parts)
    targets = np.concatenate(tgt_parts)
    flat = np.empty(len(targets))
    for start in range(0, len(targets), _CHUNK):
        sl = slice(start, start + _CHUNK)
        win = windows[sl]
        lp = log_softmax(batch_logits(params, win, win >= 0))
        flat[sl] = lp[np.arange(win.shape[0]), targets[sl]]
    out = []
    pos = 0
    for n in lens:
        out.append(flat[pos : pos + n].copy())
        pos += n
    return out


# --- backward pass ---


def zeros_like_grad(params: PolicyParams) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(t) for n, t in params.tensors.items()}


def _scatter_add_rows(out: np.ndarray, rows: np.ndarray, values: np.ndarray) -> None:
    """out[rows] += values with repeated rows, via sort + segmented reduce."""
    if rows.size == 0:
        return
    order = np.argsort(rows, kind="stable")
    rows = rows[order]
    values = values[order]
    uniq, starts = np.unique(rows, return_index=True)
    out[uniq] += np.add.reduceat(values, starts, axis=0)


def accumulate_grad(
    params: PolicyParams,
    sequences: list[tuple[np.ndarray, np.ndarray]],
    weights: list[np.ndarray],
) -> dict[str, np.ndarray]:
    """Gradient of L = sum_{i,t} w[i][t] * logprob(response_i[t]) wrt params.

    ``sequences`` holds (prompt, response) token-index pairs; ``weights`` one
    float per response position. Positions with weight exactly 0 contribute
    nothing, bitwise.
    """
    if len(sequences) != len(weights):
        raise InputError("sequences and weights length mismatch")
    arch = params.arch
    win_parts, val_parts, tgt_parts, w_parts = [], [], [], []
    for (prompt, response), w in zip(sequences, weights):
        prompt, response = _validate_sequence(params, prompt, response)
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (len(response),):
            raise InputError(
                f"weights shape {w.shape} does not match response length {len(response)}"
            )
        if len(response) == 0:
            continue
        keep = w != 0.0
        if not keep.any():
            continue
        windows, valid = response_windows(arch.context, prompt, response)
        win_parts.append(windows[keep])
        val_parts.append(valid[keep])
        tgt_parts.append(response[keep])
        w_parts.append(w[keep])

    grad = zeros_like_grad(params)
    if not win_parts:
        return grad
    windows = np.concatenate(win_parts)
    valid = np.concatenate(val_parts)
    targets = np.concatenate(tgt_parts)
    w_all = np.concatenate(w_parts)

    v = arch.vocab_size
    offsets = np.arange(arch.context, dtype=np.int64) * v
    w2 = params["w2"]
    for start in range(0, len(targets), _CHUNK):
        sl = slice(start, start + _CHUNK)
        win, val, tgt, w = windows[sl], valid[sl], targets[sl], w_all[sl]
        z, lg = _forward(params, win, val)
        p = softmax(lg)
        # d logprob / d logits = onehot(target) - softmax
        dlogits = p * (-w[:, None])
        dlogits[np.arange(len(tgt)), tgt] += w
        grad["b2"] += dlogits.sum(axis=0)
        grad["w2"] += z.T @ dlogits
        da = (dlogits @ w2.T) * (1.0 - z * z)
        grad["b1"] += da.sum(axis=0)
        flat = (offsets[None, :] + np.where(val, win, 0))[val]
        contrib = np.broadcast_to(da[:, None, :], (len(tgt), arch.context, da.shape[1]))[val]
        _scatter_add_rows(grad["w1"], flat, contrib)
    return grad


# --- optimization ---


@dataclass
class OptimizerState:
    """AdamW moments plus hyperparameters; step counts completed updates."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: PolicyParams, lr: float, **kwargs) -> "OptimizerState":
        return cls(
            lr=lr,
            m={n: np.zeros_like(t) for n, t in params.tensors.items()},
            v={n: np.zeros_like(t) for n, t in params.tensors.items()},
            **kwargs,
        )


def adamw_step(
    params: PolicyParams,
    grad: dict[str, np.ndarray],
    state: OptimizerState,
    lr_scale: float = 1.0,
) -> tuple[PolicyParams, OptimizerState]:
    """One decoupled-weight-decay AdamW update with bias correction, in place.

    A non-finite gradient refuses the step and leaves params/state untouched.
    """
    if set(grad) != set(params.tensors):
        raise InputError("gradient tensor names do not match params")
    for name, g in grad.items():
        if g.shape != params[name].shape:
            raise InputError(f"gradient {name}: shape mismatch")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}; step refused")
    state.step += 1
    t = state.step
    lr = state.lr * lr_scale
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grad.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        denom = np.sqrt(v / bc2) + state.eps
        # zero moment with eps=0 must update by 0, not 0/0
        update = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
        p = params.tensors[name]
        p -= lr * (update + state.weight_decay * p)
    return params, state


def grad_global_norm(grad: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grad.values())))


def clip_grad_norm(
    grad: dict[str, np.ndarray], threshold: float
) -> dict[str, np.ndarray]:
    """Scale the gradient to global L2 norm <= threshold; no-op when already under."""
    if threshold <= 0:
        raise InputError("clip threshold must be positive")
    norm = grad_global_norm(grad)
    if norm <= threshold:
        return grad
    scale = threshold / norm
    return {n: g * scale for n, g in grad.items()}


def lr_schedule(
    kind: str, step: int, total_steps: int, epoch: int = 0, decay: float = 0.8
) -> float:
    """Learning-rate multiplier.

    ``warmup``: linear 0 -> 1 over the first 10% of total steps, then 1.
    ``sft-decay``: multiplicative per-epoch decay, decay**epoch.
    """
    if kind == "warmup":
        if step > total_steps:
            raise InputError("step exceeds total_steps")
        warmup_steps = 0.1 * total_steps
        if warmup_steps <= 0:
            return 1.0
        return min(1.0, step / warmup_steps)
    if kind == "sft-decay":
        return decay**epoch
    raise ConfigError(f"unknown lr schedule kind: {kind!r}")
