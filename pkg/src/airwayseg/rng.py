"""Named random streams derived from one run seed.

Each consumer (phantom, sampler, augmentation, init, ...) gets its own
generator so that changing how much randomness one part uses does not shift
any other part.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def torch_seed(seed: int, name: str = "init") -> int:
    return int(stream(seed, name).integers(2**62))


def seed_torch(seed: int, name: str = "init") -> None:
    torch.manual_seed(torch_seed(seed, name))
