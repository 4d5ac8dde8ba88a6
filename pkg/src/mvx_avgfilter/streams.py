"""Reproducible random-number streams.

A single master seed expands into independent named substreams through
labeled hashing: each label (strings and integers, e.g. ("signal", "slow",
particle, component)) is hashed to entropy words that extend the master
seed's SeedSequence. The counter-based Philox generator sits underneath,
so streams are statistically independent, cheap to create, and stable:
adding particles, changing thread counts, or reordering work never
perturbs an existing stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

# 64-bit mask; SeedSequence entropy words are arbitrary-size ints but we
# keep everything inside u64 so digests serialize predictably.
_U64 = (1 << 64) - 1


def _label_words(label) -> list[int]:
    if isinstance(label, (int, np.integer)):
        payload = b"i:" + int(label).to_bytes(16, "little", signed=True)
    elif isinstance(label, str):
        payload = b"s:" + label.encode("utf-8")
    else:
        raise TypeError(f"stream labels must be str or int, got {type(label).__name__}")
    digest = hashlib.sha256(payload).digest()
    return [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]


def seed_sequence(master_seed: int, *labels) -> np.random.SeedSequence:
    entropy = [int(master_seed) & _U64]
    for lab in labels:
        entropy.extend(_label_words(lab))
    return np.random.SeedSequence(entropy)


def stream(master_seed: int, *labels) -> np.random.Generator:
    """Independent generator for (master_seed, labels)."""
    return np.random.Generator(np.random.Philox(seed_sequence(master_seed, *labels)))


def derive_seed(master_seed: int, *labels) -> int:
    """Collapse a labeled substream to a plain u64 seed for APIs that take one."""
    return int(seed_sequence(master_seed, *labels).generate_state(1, np.uint64)[0])


def normal_increments(
    master_seed: int,
    label: str,
    steps: int,
    count: int,
    dims: int,
    scale: float,
) -> np.ndarray:
    """Gaussian increment block of shape (steps, count, dims), sd = scale.

    One stream per (particle, component) under the given label; particle i's
    draws are a fixed function of (seed, label, i, j) alone, so growing the
    ensemble leaves earlier particles' noise untouched.
    """
    out = np.empty((steps, count, dims), dtype=np.float64)
    for i in range(count):
        for j in range(dims):
            gen = stream(master_seed, label, i, j)
            out[:, i, j] = gen.normal(0.0, scale, size=steps)
    return out
