"""Deterministic random streams derived from a single integer seed.

Every stochastic component (weight init, coded apertures, input perturbation,
divergence probes, synthetic scenes, measurement noise) pulls from its own
named child stream, so adding draws to one component never shifts another.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream"]


def stream(seed: int, name: str) -> np.random.Generator:
    """A generator keyed by (seed, name), stable across runs and platforms."""
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
