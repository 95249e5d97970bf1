"""Deterministic random stream derivation.

Every stochastic step in a scenario draws from a generator derived from a
tuple of labels such as (seed, "finetune", round, client_id). Derivation goes
through SHA-256, so streams are independent of call order, stable across
platforms, and reproducible from the label tuple alone.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "stream_id", "stream_from_id"]

_SEP = b"\x1f"


def _digest(keys: tuple) -> bytes:
    material = _SEP.join(repr(k).encode("utf-8") for k in keys)
    return hashlib.sha256(material).digest()


def stream(*keys) -> np.random.Generator:
    """Derive an independent Generator from a tuple of hashable labels."""
    if not keys:
        raise ValueError("at least one label is required")
    words = np.frombuffer(_digest(keys), dtype="<u4")
    seq = np.random.SeedSequence(entropy=[int(w) for w in words])
    return np.random.default_rng(seq)


def stream_id(*keys) -> int:
    """Collapse a label tuple to a 64-bit id that can travel in a message."""
    if not keys:
        raise ValueError("at least one label is required")
    return int.from_bytes(_digest(keys)[:8], "little")


def stream_from_id(ident: int) -> np.random.Generator:
    """Rebuild the Generator behind a 64-bit stream id."""
    if not 0 <= int(ident) < 2**64:
        raise ValueError(f"stream id out of range: {ident}")
    return np.random.default_rng(np.random.SeedSequence(entropy=int(ident)))
