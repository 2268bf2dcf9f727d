"""Explicit, splittable random streams.

Every stochastic call in the package takes a ``numpy.random.Generator``
built here. Streams are Philox (counter-based) keyed by a seed plus an
optional path of integer keys, so ``make_rng(seed, item)`` gives an
independent stream per batch item regardless of scheduling order.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-friendly snapshot of a generator's bit state."""
    state = rng.bit_generator.state
    return _jsonable(state)


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = _from_jsonable(state)
    return np.random.Generator(bg)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": [int(v) for v in obj.tolist()], "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
