"""Stable derivation of per-stream RNG seeds from a global seed plus labels."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """64-bit seed from hashing the string forms of ``parts``; stable across runs."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
