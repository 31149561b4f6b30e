"""Frozen copies of trained models (the previous classifier M_p and generator G_p)."""

import copy

import torch
import torch.nn as nn


class Snapshot(nn.Module):
    """
    Deep copy of a module that stays in evaluation mode and never records
    gradients. Attribute lookups the wrapper does not define fall through to
    the wrapped module (num_classes, tap_spec, ...).
    """

    def __init__(self, module: nn.Module):
        super().__init__()
        source = module.module if isinstance(module, Snapshot) else module
        frozen = copy.deepcopy(source)
        frozen.eval()
        for param in frozen.parameters():
            param.requires_grad_(False)
        self.module = frozen

    def train(self, mode: bool = True) -> "Snapshot":
        super().train(False)
        return self

    def forward(self, *args, **kwargs):
        with torch.no_grad():
            return self.module(*args, **kwargs)

    def __getattr__(self, name: str):
        try:
            return super().__getattr__(name)
        except AttributeError:
            return getattr(self._modules["module"], name)


def snapshot(module: nn.Module) -> Snapshot:
    """Frozen copy of `module`."""
    return Snapshot(module)


ClassifierSnapshot = Snapshot
GeneratorSnapshot = Snapshot
