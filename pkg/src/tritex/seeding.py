"""Seed-splitting helpers.

All randomness in a run flows from a single integer seed. Sub-streams are
derived with ``numpy.random.SeedSequence.spawn``, which guarantees
statistically independent children, and consumers take children by fixed
position. Changing the number or order of children in a caller changes its
random streams, so each caller documents its child order.
"""

from __future__ import annotations

import numpy as np
import torch

__all__ = ["child_sequences", "numpy_rng", "torch_generator"]


def child_sequences(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Split ``seed`` into ``count`` independent seed sequences."""
    return np.random.SeedSequence(seed).spawn(count)


def numpy_rng(seq: np.random.SeedSequence) -> np.random.Generator:
    """NumPy generator drawing from one derived stream."""
    return np.random.default_rng(seq)


def torch_generator(seq: np.random.SeedSequence) -> torch.Generator:
    """Torch CPU generator seeded from one derived stream.

    The torch seed is the first 63 bits of the sequence's state word, so the
    mapping is stable across platforms.
    """
    state = int(seq.generate_state(1, dtype=np.uint64)[0]) & 0x7FFF_FFFF_FFFF_FFFF
    gen = torch.Generator()
    gen.manual_seed(state)
    return gen
