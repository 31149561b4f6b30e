"""
Conditional style-based generator G(z, y, t).

A two-layer mapping network turns (z, class embedding, domain embedding) into
a style code w. A learned 4x4 constant is then refined by style-modulated 3x3
convolutions (weight modulation + demodulation), upsampling by 2 at evenly
spread layers until the image size is reached, and a final modulated 1x1
toRGB layer without demodulation. tanh bounds the output to [-1, 1].

Per-pixel noise injection is left out so that evaluation-mode outputs are a
deterministic function of (z, y, t).
"""

import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.utils import save_image

from mfa_replay.config import ModelConfig
from mfa_replay.errors import ValidationError

logger = logging.getLogger(__name__)

BASE_RESOLUTION = 4


class ModulatedConv2d(nn.Module):
    """Convolution whose weights are scaled per sample by a style vector."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        kernel_size: int,
        style_dim: int,
        demodulate: bool = True,
        eps: float = 1e-8,
    ):
        super().__init__()
        self.out_features = out_features
        self.demodulate = demodulate
        self.padding = (kernel_size - 1) // 2
        self.eps = eps
        # Equalized learning rate: unit-variance weights scaled at runtime
        self.weight = nn.Parameter(torch.randn(out_features, in_features, kernel_size, kernel_size))
        self.weight_scale = 1.0 / math.sqrt(in_features * kernel_size * kernel_size)
        self.to_style = nn.Linear(style_dim, in_features)
        nn.init.ones_(self.to_style.bias)
        self.bias = nn.Parameter(torch.zeros(out_features))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        b, _, h, width = x.shape
        s = self.to_style(w)[:, None, :, None, None]
        weights = self.weight[None] * self.weight_scale * s
        if self.demodulate:
            sigma_inv = torch.rsqrt((weights**2).sum(dim=(2, 3, 4), keepdim=True) + self.eps)
            weights = weights * sigma_inv
        # One grouped convolution applies every sample's own weights
        x = x.reshape(1, -1, h, width)
        _, _, *ws = weights.shape
        weights = weights.reshape(b * self.out_features, *ws)
        x = F.conv2d(x, weights, padding=self.padding, groups=b)
        x = x.reshape(-1, self.out_features, h, width)
        return x + self.bias[None, :, None, None]


class StyleLayer(nn.Module):
    def __init__(self, channels: int, style_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = ModulatedConv2d(channels, channels, 3, style_dim)
        self.activation = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.activation(self.conv(x, w))


def upsample_positions(num_layers: int, num_upsamples: int) -> List[int]:
    """Indices of the layers that double the resolution, spread evenly from the first."""
    if num_upsamples > num_layers:
        raise ValidationError(
            f"{num_layers} synthesis layers cannot upsample {num_upsamples} times"
        )
    if num_upsamples == 0:
        return []
    return sorted({int(i * num_layers / num_upsamples) for i in range(num_upsamples)})


class Generator(nn.Module):
    """
    Conditional generator over classes and a growing list of domains.

    Args:
        num_classes: Number of classes L
        num_domains: Number of domains known at construction
        image_shape: (C, H, W); H == W == 4 * 2**k
        arch: Noise/style sizes and the number of style layers
    """

    def __init__(
        self, num_classes: int, num_domains: int, image_shape: Sequence[int], arch: ModelConfig
    ):
        super().__init__()
        channels, height, width = (int(v) for v in image_shape)
        if height != width:
            raise ValidationError(f"the generator needs square images, got {height}x{width}")
        num_upsamples = int(round(math.log2(height / BASE_RESOLUTION))) if height >= BASE_RESOLUTION else -1
        if num_upsamples < 0 or BASE_RESOLUTION * 2**num_upsamples != height:
            raise ValidationError(f"image side must be 4 * 2**k, got {height}")
        if num_domains < 1:
            raise ValidationError("the generator needs at least one domain")

        self.num_classes = num_classes
        self.image_shape = (channels, height, width)
        self.noise_dim = arch.noise_dim
        self.embed_dim = arch.embed_dim

        self.class_embedding = nn.Embedding(num_classes, arch.embed_dim)
        self.domain_embedding = nn.Embedding(num_domains, arch.embed_dim)
        self.mapping = nn.Sequential(
            nn.Linear(arch.noise_dim + 2 * arch.embed_dim, arch.style_dim),
            nn.LeakyReLU(0.2),
            nn.Linear(arch.style_dim, arch.style_dim),
            nn.LeakyReLU(0.2),
        )

        ch = arch.generator_channels
        self.constant = nn.Parameter(torch.randn(1, ch, BASE_RESOLUTION, BASE_RESOLUTION))
        # style_layers counts the toRGB layer too
        num_convs = arch.style_layers - 1
        ups = set(upsample_positions(num_convs, num_upsamples))
        self.layers = nn.ModuleList(
            StyleLayer(ch, arch.style_dim, upsample=i in ups) for i in range(num_convs)
        )
        self.to_rgb = ModulatedConv2d(ch, channels, 1, arch.style_dim, demodulate=False)

    @property
    def num_domains(self) -> int:
        return int(self.domain_embedding.num_embeddings)

    def grow_domains(self, count: int = 1) -> None:
        """Append `count` freshly initialized domain embedding rows."""
        if count < 1:
            return
        old = self.domain_embedding
        grown = nn.Embedding(old.num_embeddings + count, old.embedding_dim).to(old.weight.device)
        with torch.no_grad():
            grown.weight[: old.num_embeddings] = old.weight
        self.domain_embedding = grown

    def sample_noise(self, n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """z ~ N(0, I), drawn on CPU (so seeds are device independent)."""
        return torch.randn(n, self.noise_dim, generator=generator)

    def _check_conditions(self, z: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> None:
        n = z.shape[0]
        if z.shape != (n, self.noise_dim) or y.shape != (n,) or t.shape != (n,):
            raise ValidationError("z must be N x noise_dim, y and t must have N entries")
        if n and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValidationError(f"class labels must lie in [0, {self.num_classes})")
        if n and (t.min() < 0 or t.max() >= self.num_domains):
            raise ValidationError(
                f"domain index {int(t.max())} unknown; the generator covers 0..{self.num_domains - 1}"
            )

    def style(self, z: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        code = torch.cat([z, self.class_embedding(y), self.domain_embedding(t)], dim=1)
        return self.mapping(code)

    def forward(self, z: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        y, t = y.to(torch.long), t.to(torch.long)
        self._check_conditions(z, y, t)
        w = self.style(z, y, t)
        x = self.constant.expand(z.shape[0], -1, -1, -1)
        for layer in self.layers:
            x = layer(x, w)
        return torch.tanh(self.to_rgb(x, w))


def generate(gen: nn.Module, z: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """G(z, y, t) as N x C x H x W images in [-1, 1]."""
    device = next(gen.parameters()).device
    return gen(z.to(device), y.to(device), t.to(device))


def export_sample_sheet(
    gen: nn.Module,
    num_classes: int,
    domains: Sequence[int],
    path: Union[str, Path],
    seed: int = 0,
    per_cell: int = 8,
) -> Path:
    """
    Save a PNG grid with one row per (domain, class) and `per_cell` samples per row.

    The same noise vectors are reused in every row so rows differ only by
    their conditioning.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    noise_generator = torch.Generator().manual_seed(int(seed))
    z = torch.randn(per_cell, gen.noise_dim, generator=noise_generator)
    rows = []
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        for domain in domains:
            for cls in range(num_classes):
                y = torch.full((per_cell,), cls, dtype=torch.long)
                t = torch.full((per_cell,), int(domain), dtype=torch.long)
                rows.append(generate(gen, z, y, t).cpu())
    gen.train(was_training)
    save_image(torch.cat(rows), str(path), nrow=per_cell, normalize=True, value_range=(-1, 1))
    logger.debug(f"Sample sheet written to {path}", extra={"domains": list(domains)})
    return path
