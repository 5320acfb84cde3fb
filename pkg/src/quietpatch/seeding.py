"""Deterministic seed derivation for all randomness in the pipeline.

Every random draw (noise, GP interpolation, weight init, dataset synthesis)
flows from a master seed through named sub-streams, so runs are reproducible
and training can resume mid-pipeline without saving RNG blobs.
"""

import hashlib
from contextlib import contextmanager

import torch


def derive_seed(master: int, *parts) -> int:
    """Map (master seed, stream name parts) to a stable 63-bit seed."""
    key = repr((int(master),) + tuple(parts)).encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def generator_for(master: int, *parts) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(derive_seed(master, *parts))
    return g


@contextmanager
def seeded_init(master: int, *parts):
    """Run module construction under a forked, seeded global RNG.

    Keeps parameter initialisation deterministic without disturbing the
    caller's RNG state.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(master, *parts))
        yield
