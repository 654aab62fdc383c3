"""
Seeded random streams.

A run seed is expanded with `numpy.random.SeedSequence` into independent
child streams, so the task sequence and the Bernoulli gate sequence of one
SGD run never share state, and replicas never share streams.
"""

from __future__ import annotations

from typing import List, Tuple, Union

import numpy as np

SeedLike = Union[int, np.random.SeedSequence]
RunSeed = Union[SeedLike, Tuple[SeedLike, SeedLike]]


def as_seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def sgd_streams(seed: RunSeed) -> Tuple[np.random.Generator, np.random.Generator]:
    """
    (task_rng, xi_rng) for one SGD run.

    A single seed is split into two children; a (task_seed, xi_seed) pair
    seeds each stream directly, so either can be varied alone.
    """
    if isinstance(seed, tuple):
        task_seed, xi_seed = seed
        return (
            np.random.default_rng(as_seed_sequence(task_seed)),
            np.random.default_rng(as_seed_sequence(xi_seed)),
        )
    task_ss, xi_ss = as_seed_sequence(seed).spawn(2)
    return np.random.default_rng(task_ss), np.random.default_rng(xi_ss)


def replica_seeds(seed: SeedLike, replicas: int) -> List[np.random.SeedSequence]:
    """One child seed per replica, in replica order."""
    return as_seed_sequence(seed).spawn(replicas)


def init_stream(seed: SeedLike) -> np.random.Generator:
    """Stream for starting points and oracle sample points, disjoint from run streams."""
    ss = as_seed_sequence(seed)
    return np.random.default_rng(np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (2**31 - 1,)))


def describe_seed(seed: RunSeed) -> str:
    if isinstance(seed, tuple):
        return "/".join(describe_seed(s) for s in seed)
    if isinstance(seed, np.random.SeedSequence):
        key = ".".join(str(k) for k in seed.spawn_key)
        return f"{seed.entropy}" + (f":{key}" if key else "")
    return str(seed)
