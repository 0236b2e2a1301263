"""Deterministic RNG derivation: one master seed, addressable sub-streams.

Every random draw in a run comes from a stream addressed by
(master entropy, branch, purpose, *indices). Replaying any epoch or batch
only needs the lineage plus the address, and a rollback bumps `branch` so
the resumed run sees fresh randomness without touching the master seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# purpose codes for stream addresses
INIT = 0
SHUFFLE = 1
ATTACK = 2
EVAL = 3
PROBE_SELECT = 4
PROBE = 5
SIGN_DIFF = 6


@dataclass(frozen=True)
class RngLineage:
    """Master entropy plus the rollback branch counter."""

    entropy: int
    branch: int = 0

    def next_branch(self) -> "RngLineage":
        return RngLineage(self.entropy, self.branch + 1)

    def to_dict(self) -> dict:
        return {"entropy": format(self.entropy, "x"), "branch": self.branch}

    @staticmethod
    def from_dict(d: dict) -> "RngLineage":
        return RngLineage(entropy=int(d["entropy"], 16), branch=int(d["branch"]))


def stream(lineage: RngLineage, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=lineage.entropy,
                                  spawn_key=(lineage.branch, *key))


def generator(lineage: RngLineage, *key: int) -> np.random.Generator:
    return np.random.default_rng(stream(lineage, *key))


def substream(parent: np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    """Child stream at a fixed index; independent of spawn() call order."""
    return np.random.SeedSequence(entropy=parent.entropy,
                                  spawn_key=tuple(parent.spawn_key) + key)


def as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)
