"""
Batch augmentation: random crop, horizontal/vertical flips and random affine.

Every image in a batch draws its own transform parameters from a CPU generator
seeded with `seed`, so augmentation is a pure function of (images, policy,
seed). Labels are never touched and batch order is preserved.
"""

import math

import torch
import torch.nn.functional as F

from mfa_replay.config import AugmentationPolicy
from mfa_replay.utils.seeding import torch_generator


def _uniform(n: int, low: float, high: float, generator: torch.Generator) -> torch.Tensor:
    return low + (high - low) * torch.rand(n, generator=generator, dtype=torch.float64)


def _random_crop(images: torch.Tensor, padding: int, generator: torch.Generator) -> torch.Tensor:
    n, _, h, w = images.shape
    # reflect padding needs padding < side
    pad = min(padding, h - 1, w - 1)
    if pad <= 0:
        return images
    padded = F.pad(images, (pad, pad, pad, pad), mode="reflect")
    top = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    left = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    return torch.stack(
        [padded[i, :, int(top[i]) : int(top[i]) + h, int(left[i]) : int(left[i]) + w] for i in range(n)]
    )


def _random_flip(images: torch.Tensor, prob: float, dim: int, generator: torch.Generator) -> torch.Tensor:
    if prob <= 0.0:
        return images
    mask = torch.rand(images.shape[0], generator=generator) < prob
    if not mask.any():
        return images
    flipped = images.clone()
    idx = mask.nonzero(as_tuple=True)[0].to(images.device)
    flipped[idx] = torch.flip(images[idx], dims=[dim])
    return flipped


def _random_affine(
    images: torch.Tensor, policy: AugmentationPolicy, generator: torch.Generator
) -> torch.Tensor:
    n = images.shape[0]
    angle = _uniform(n, -policy.affine_degrees, policy.affine_degrees, generator) * math.pi / 180.0
    # normalized coordinates span 2 units across the image
    tx = _uniform(n, -policy.affine_translate, policy.affine_translate, generator) * 2.0
    ty = _uniform(n, -policy.affine_translate, policy.affine_translate, generator) * 2.0
    lo, hi = policy.affine_scale
    scale = _uniform(n, lo, hi, generator)
    cos, sin = torch.cos(angle) / scale, torch.sin(angle) / scale
    theta = torch.stack(
        [torch.stack([cos, -sin, tx], dim=1), torch.stack([sin, cos, ty], dim=1)], dim=1
    ).to(device=images.device, dtype=images.dtype)
    grid = F.affine_grid(theta, list(images.shape), align_corners=False)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def augment_batch(images: torch.Tensor, policy: AugmentationPolicy, seed: int) -> torch.Tensor:
    """
    Apply independent random transforms to every image of a batch.

    Args:
        images: N x C x H x W in [-1, 1]
        policy: Enabled transforms and ranges; an identity policy returns a copy
        seed: Same seed, same output

    Returns:
        Augmented batch with the input's shape, clamped to [-1, 1]
    """
    out = images.detach().clone()
    if policy.is_identity or out.shape[0] == 0:
        return out
    generator = torch_generator(seed)
    out = _random_crop(out, policy.crop_padding, generator)
    out = _random_flip(out, policy.hflip_prob, 3, generator)
    out = _random_flip(out, policy.vflip_prob, 2, generator)
    needs_affine = (
        policy.affine_degrees > 0
        or policy.affine_translate > 0
        or tuple(policy.affine_scale) != (1.0, 1.0)
    )
    if needs_affine:
        out = _random_affine(out, policy, generator)
    return out.clamp_(-1.0, 1.0)
