"""Deterministic per-chain random streams.

A chain is identified by an integer ``seed`` plus an optional key path (for
example ``(grid_point, replicate)``).  The pair seeds a
:class:`numpy.random.SeedSequence` whose three children drive independent
Philox4x64 counter-based generators:

* ``minibatch`` -- subsample indices,
* ``noise``     -- Gaussian increments,
* ``accept``    -- Metropolis uniforms.

Because the streams are disjoint, changing the subsample size (or switching
between SGLD and Euler) leaves the Gaussian sequence untouched.  Draws are
consumed element by element, so drawing a block of 1000 normals yields the
same numbers as drawing them one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

_N_STREAMS = 3


@dataclass
class ChainStreams:
    minibatch: np.random.Generator
    noise: np.random.Generator
    accept: np.random.Generator


def _check_key(seed: int, key: Sequence[int]) -> tuple[int, ...]:
    if int(seed) < 0 or int(seed) >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    key = tuple(int(k) for k in key)
    if any(k < 0 for k in key):
        raise ValueError(f"key entries must be non-negative, got {key}")
    return key


def chain_streams(seed: int, *key: int) -> ChainStreams:
    key = _check_key(seed, key)
    children = np.random.SeedSequence(int(seed), spawn_key=key).spawn(_N_STREAMS)
    gens = [np.random.Generator(np.random.Philox(c)) for c in children]
    return ChainStreams(*gens)


def generator(seed: int, *key: int) -> np.random.Generator:
    """A single Philox generator for data synthesis and other one-off draws."""
    key = _check_key(seed, key)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))
