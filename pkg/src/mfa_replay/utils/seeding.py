"""Seeding helpers. All randomness in a run funnels through these."""

import random

import numpy as np
import torch


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; optionally request deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        if torch.backends.cudnn.is_available():
            torch.backends.cudnn.benchmark = False
            torch.backends.cudnn.deterministic = True


def torch_generator(seed: int) -> torch.Generator:
    """A CPU generator seeded with `seed`; sample on CPU then move to the device."""
    generator = torch.Generator(device="cpu")
    generator.manual_seed(int(seed))
    return generator
