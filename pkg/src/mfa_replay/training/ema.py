"""Exponential moving average of generator weights."""

import copy
from typing import Iterable, Union

import torch
import torch.nn as nn

from mfa_replay.errors import ValidationError

ParamSource = Union[nn.Module, Iterable[torch.Tensor]]


def _tensors(source: ParamSource) -> list:
    if isinstance(source, nn.Module):
        return list(source.parameters())
    return list(source)


def ema_update(ema_params: ParamSource, live_params: ParamSource, decay: float) -> None:
    """
    In place: ema <- decay * ema + (1 - decay) * live.

    Modules are matched parameter by parameter; their buffers (batch-norm
    statistics) are copied as they are.

    Raises:
        ValidationError: decay outside [0, 1) or mismatched shapes
    """
    if not 0.0 <= decay < 1.0:
        raise ValidationError(f"EMA decay must lie in [0, 1), got {decay}")
    ema_list, live_list = _tensors(ema_params), _tensors(live_params)
    if len(ema_list) != len(live_list):
        raise ValidationError("EMA and live parameter lists differ in length")
    with torch.no_grad():
        for ema, live in zip(ema_list, live_list):
            if ema.shape != live.shape:
                raise ValidationError(
                    f"EMA parameter shape {tuple(ema.shape)} != live shape {tuple(live.shape)}"
                )
            ema.mul_(decay).add_(live.detach(), alpha=1.0 - decay)
        if isinstance(ema_params, nn.Module) and isinstance(live_params, nn.Module):
            for ema_buf, live_buf in zip(ema_params.buffers(), live_params.buffers()):
                ema_buf.copy_(live_buf)


def ema_copy(module: nn.Module) -> nn.Module:
    """A detached copy to accumulate the average in."""
    ema = copy.deepcopy(module)
    ema.eval()
    for param in ema.parameters():
        param.requires_grad_(False)
    return ema
