"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("generator", "init", "train", "variants", "lissa-shuffle", "control", "ral")


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(root_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` (and optional integer sub-keys)."""
    if not isinstance(root_seed, (int, np.integer)) or isinstance(root_seed, bool):
        raise TypeError(f"seed must be an integer, got {type(root_seed).__name__}")
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(_key(name), *map(int, extra)))
    return np.random.default_rng(seq)


def derive_seed(root_seed: int, name: str, *extra: int) -> int:
    return int(substream(root_seed, name, *extra).integers(0, 2**31 - 1))
