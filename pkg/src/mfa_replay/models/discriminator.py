"""
Multi-scale feature aggregation (MFA) projection discriminator.

The discriminator never sees pixels. It consumes classifier feature taps:
the shallowest tap enters through a 1x1 convolution, and every deeper tap is
concatenated with the trunk activation once the trunk has been strided down
to the tap's resolution, then fused back to the trunk width by a 1x1
convolution. A minibatch-stddev channel is appended before the last trunk
convolution.

Conditioning follows the projection discriminator:

    D(taps, y, t) = u(phi) + <e_class(y), phi> + <e_domain(t), phi>

where phi is the sum-pooled trunk output. The domain term is dropped when t
is None (the classifier-adaptation use).

The same module type serves the -MFA ablation: built with a single tap it is
a plain single-entry feature discriminator.
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import torch
import torch.nn as nn

from mfa_replay.config import ModelConfig
from mfa_replay.errors import ValidationError
from mfa_replay.models.classifier import TapSpec

MIN_TRUNK_RESOLUTION = 4


def minibatch_stddev(features: torch.Tensor) -> torch.Tensor:
    """
    Append one channel holding the batch-wide mean of per-position,
    per-channel population standard deviations.

    A batch of one, or identical rows, gives an all-zero channel.
    """
    n, _, h, w = features.shape
    var = features.var(dim=0, unbiased=False)
    # sqrt has an infinite slope at 0; keep exact zeros and finite gradients
    std = torch.where(var > 0, torch.sqrt(var.clamp_min(1e-30)), torch.zeros_like(var))
    stat = std.mean().reshape(1, 1, 1, 1).expand(n, 1, h, w)
    return torch.cat([features, stat], dim=1)


@dataclass(frozen=True)
class TrunkLayer:
    stride: int
    fuse_tap: Optional[str]


def plan_trunk(taps: Sequence[TapSpec], num_layers: int) -> List[TrunkLayer]:
    """
    Stride/fusion schedule of the trunk.

    Deeper taps enter right after the convolution that brings the trunk to
    their resolution; leftover layers keep striding down to a 4x4 map and
    then run at stride 1.

    Raises:
        ValidationError: Taps are not ordered shallow to deep with halving
            sizes, or there are more taps than trunk layers can host
    """
    if not taps:
        raise ValidationError("the discriminator needs at least one tap")
    plan: List[TrunkLayer] = []
    resolution = taps[0].height
    for spec in taps[1:]:
        steps = 0
        while resolution > spec.height:
            resolution = (resolution - 1) // 2 + 1
            steps += 1
        if resolution != spec.height:
            raise ValidationError(
                f"tap '{spec.name}' ({spec.height}px) cannot be reached from {resolution}px by halving"
            )
        if steps == 0:
            plan.append(TrunkLayer(1, spec.name))
        else:
            plan.extend(TrunkLayer(2, None) for _ in range(steps - 1))
            plan.append(TrunkLayer(2, spec.name))
    if len(plan) >= num_layers:
        raise ValidationError(
            f"{len(taps)} taps need {len(plan) + 1} trunk layers, only {num_layers} configured"
        )
    while len(plan) < num_layers:
        if resolution > MIN_TRUNK_RESOLUTION:
            resolution = (resolution - 1) // 2 + 1
            plan.append(TrunkLayer(2, None))
        else:
            plan.append(TrunkLayer(1, None))
    return plan


class Discriminator(nn.Module):
    """
    Args:
        taps: Specs of the consumed taps, shallow to deep
        num_classes: Rows of the class embedding
        num_domains: Rows of the domain embedding (grows with the sequence)
        arch: Width, depth and fusion init scale
    """

    def __init__(
        self, taps: Sequence[TapSpec], num_classes: int, num_domains: int, arch: ModelConfig
    ):
        super().__init__()
        taps = sorted(taps, key=lambda s: -s.height)
        self.tap_specs: Dict[str, TapSpec] = {spec.name: spec for spec in taps}
        self.tap_order = [spec.name for spec in taps]
        self.num_classes = num_classes
        width = arch.discriminator_width
        self.plan = plan_trunk(taps, arch.discriminator_layers)

        self.from_features = nn.Conv2d(taps[0].channels, width, 1)
        self.trunk = nn.ModuleList()
        self.fusion = nn.ModuleDict()
        last = len(self.plan) - 1
        for index, layer in enumerate(self.plan):
            in_ch = width + 1 if index == last else width
            self.trunk.append(nn.Conv2d(in_ch, width, 3, layer.stride, 1))
            if layer.fuse_tap is not None:
                self.fusion[layer.fuse_tap] = self._fusion_conv(
                    width, self.tap_specs[layer.fuse_tap].channels, arch.fusion_init_scale
                )
        self.activation = nn.LeakyReLU(0.2)

        self.head = nn.Linear(width, 1)
        self.class_embedding = nn.Embedding(num_classes, width)
        self.domain_embedding = nn.Embedding(num_domains, width)
        nn.init.xavier_uniform_(self.class_embedding.weight)
        nn.init.xavier_uniform_(self.domain_embedding.weight)

    @staticmethod
    def _fusion_conv(width: int, tap_channels: int, scale: float) -> nn.Conv2d:
        # Identity on the trunk channels, small weights on the tap channels
        conv = nn.Conv2d(width + tap_channels, width, 1)
        with torch.no_grad():
            conv.weight.mul_(scale)
            conv.weight[:, :width].zero_()
            conv.weight[:, :width, 0, 0] += torch.eye(width)
            conv.bias.zero_()
        return conv

    @property
    def num_domains(self) -> int:
        return int(self.domain_embedding.num_embeddings)

    def grow_domains(self, count: int = 1) -> None:
        """Append `count` freshly initialized domain embedding rows."""
        if count < 1:
            return
        old = self.domain_embedding
        grown = nn.Embedding(old.num_embeddings + count, old.embedding_dim).to(old.weight.device)
        nn.init.xavier_uniform_(grown.weight)
        with torch.no_grad():
            grown.weight[: old.num_embeddings] = old.weight
        self.domain_embedding = grown

    def _check_taps(self, taps: Mapping[str, torch.Tensor]) -> None:
        for name, spec in self.tap_specs.items():
            if name not in taps:
                raise ValidationError(f"missing tap '{name}'")
            if tuple(taps[name].shape[1:]) != spec.shape:
                raise ValidationError(
                    f"tap '{name}' has shape {tuple(taps[name].shape[1:])}, expected {spec.shape}"
                )

    def mfa_aggregate(self, taps: Mapping[str, torch.Tensor]) -> torch.Tensor:
        """Trunk output after every tap has entered at its depth."""
        self._check_taps(taps)
        x = self.activation(self.from_features(taps[self.tap_order[0]]))
        last = len(self.trunk) - 1
        for index, (conv, layer) in enumerate(zip(self.trunk, self.plan)):
            if index == last:
                x = minibatch_stddev(x)
            x = self.activation(conv(x))
            if layer.fuse_tap is not None:
                x = self.fusion[layer.fuse_tap](torch.cat([x, taps[layer.fuse_tap]], dim=1))
        return x

    def pooled(self, taps: Mapping[str, torch.Tensor]) -> torch.Tensor:
        """phi: sum-pooled trunk features, N x width."""
        return self.mfa_aggregate(taps).sum(dim=(2, 3))

    def project(
        self, phi: torch.Tensor, y: torch.Tensor, t: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        y = y.to(torch.long)
        if y.numel() and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValidationError(f"class labels must lie in [0, {self.num_classes})")
        logit = self.head(phi).squeeze(1) + (self.class_embedding(y) * phi).sum(dim=1)
        if t is not None:
            t = t.to(torch.long)
            if t.numel() and (t.min() < 0 or t.max() >= self.num_domains):
                raise ValidationError(
                    f"domain index {int(t.max())} unknown; the discriminator covers 0..{self.num_domains - 1}"
                )
            logit = logit + (self.domain_embedding(t) * phi).sum(dim=1)
        return logit

    def forward(
        self,
        taps: Mapping[str, torch.Tensor],
        y: torch.Tensor,
        t: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        return self.project(self.pooled(taps), y, t)


def mfa_aggregate(disc: Discriminator, taps: Mapping[str, torch.Tensor]) -> torch.Tensor:
    return disc.mfa_aggregate(taps)


def discriminate(
    disc: Discriminator,
    taps: Mapping[str, torch.Tensor],
    y: torch.Tensor,
    t: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One scalar logit per sample; the domain term is omitted when t is None."""
    return disc(taps, y, t)


def select_taps(taps: Mapping[str, torch.Tensor], names: Sequence[str]) -> Dict[str, torch.Tensor]:
    missing = [n for n in names if n not in taps]
    if missing:
        raise ValidationError(f"missing taps {missing}")
    return {n: taps[n] for n in names}
