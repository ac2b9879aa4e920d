"""Deterministic seed derivation shared by sampling, training, and eval."""

from __future__ import annotations

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(*parts: int) -> int:
    """Mix integer parts into one well-distributed 63-bit seed."""
    state = np.random.SeedSequence([int(p) & _MASK63 for p in parts]).generate_state(1, dtype=np.uint64)
    return int(state[0]) & _MASK63


def torch_generator(seed: int, device: str = "cpu") -> torch.Generator:
    gen = torch.Generator(device=device)
    gen.manual_seed(int(seed) & _MASK63)
    return gen
