"""Deterministic random streams.

All stochastic choices in the package (parameter init, per-step training
noise, sampling noise) are drawn from counter-style streams keyed by
``(seed, tag, *indices)``. Streams are independent of call order and of how
many other streams exist, which is what makes checkpoint resume and
re-running with a different step count reproduce earlier draws exactly.
"""

import hashlib

import numpy as np
import torch


def _key_entropy(seed, tag, indices):
    digest = hashlib.sha256(f"{seed}:{tag}:{':'.join(str(i) for i in indices)}".encode()).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(seed, tag, *indices):
    """NumPy generator for the stream keyed by (seed, tag, *indices)."""
    return np.random.default_rng(np.random.SeedSequence(_key_entropy(seed, tag, indices)))


def normal_tensor(shape, seed, tag, *indices, dtype=torch.float32):
    """Standard-normal tensor drawn from the keyed stream."""
    arr = stream(seed, tag, *indices).standard_normal(size=tuple(shape))
    return torch.from_numpy(arr).to(dtype)


def token_embedding(token, seed, dim):
    """Frozen embedding for one token, derived from a stable hash.

    The same (token, seed, dim) always maps to the same vector, across
    processes and platforms.
    """
    rng = stream(seed, "token", token)
    return rng.standard_normal(dim) / np.sqrt(dim)
