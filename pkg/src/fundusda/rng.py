"""Deterministic random-stream derivation shared by all stochastic subsystems."""

import hashlib
import random

import numpy as np
import torch


def derive_seed(seed, *tags):
    """Hash (seed, *tags) into a 63-bit integer. Pure, order-sensitive."""
    key = ":".join(str(t) for t in (seed, *tags))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


class RngHandle:
    """Named random streams derived from a single experiment seed.

    Each stochastic subsystem (weight init, augmentation, latent-noise
    sampling, shuffling) pulls from its own stream, so consuming draws in
    one subsystem never shifts the others. Deriving the same
    (name, *indices) twice returns a generator in the identical state,
    which makes results independent of worker scheduling.
    """

    def __init__(self, seed):
        self.seed = int(seed)

    def numpy(self, name, *indices):
        """Fresh numpy Generator for stream (name, *indices)."""
        return np.random.default_rng(derive_seed(self.seed, name, *indices))

    def torch(self, name, *indices):
        """Fresh torch Generator for stream (name, *indices)."""
        gen = torch.Generator()
        gen.manual_seed(derive_seed(self.seed, name, *indices))
        return gen


def seed_all(seed):
    """Seed the global RNGs and return the stream handle for `seed`.

    Global seeding covers library code that draws from default generators
    (e.g. torch parameter init at module construction); everything under
    our control draws from derived streams instead.
    """
    seed = int(seed)
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return RngHandle(seed)
