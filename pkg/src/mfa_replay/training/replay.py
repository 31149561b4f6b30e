"""
Generative replay of previous domains.

Past data is never stored. Whenever a phase needs samples of domains
0..t-1 it draws (y, tau) conditions, lets the generator synthesize images and
labels them with the current classifier's pseudo-labels.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from mfa_replay.errors import PreconditionError, ValidationError
from mfa_replay.models.classifier import pseudo_label, softmax_probs
from mfa_replay.training.losses import image_distillation_loss
from mfa_replay.utils.seeding import torch_generator

SeedLike = Union[int, torch.Generator]


@dataclass
class ReplayBatch:
    """Synthetic images of previous domains with their conditions and pseudo-labels."""

    images: torch.Tensor
    domain_indices: torch.Tensor
    conditioning_labels: torch.Tensor
    pseudo_labels: torch.Tensor

    def __len__(self) -> int:
        return int(self.images.shape[0])


def _as_generator(seed: SeedLike) -> torch.Generator:
    return seed if isinstance(seed, torch.Generator) else torch_generator(int(seed))


def _module_device(module: nn.Module) -> torch.device:
    return next(module.parameters()).device


def sample_conditions(
    n: int,
    num_domains: int,
    label_prior: Union[Sequence[float], np.ndarray, torch.Tensor],
    generator: torch.Generator,
    low_domain: int = 0,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Draw class labels from the prior and domains uniformly from low_domain..num_domains-1.

    Returns:
        (y, tau) as CPU long tensors of length n
    """
    if num_domains <= low_domain:
        raise ValidationError(f"empty domain range [{low_domain}, {num_domains})")
    prior = torch.as_tensor(np.asarray(label_prior, dtype=np.float64))
    if prior.dim() != 1 or (prior < 0).any() or prior.sum() <= 0:
        raise ValidationError("label_prior must be a non-negative vector with positive mass")
    y = torch.multinomial(prior, n, replacement=True, generator=generator)
    tau = torch.randint(low_domain, num_domains, (n,), generator=generator)
    return y, tau


@torch.no_grad()
def pseudo_label_images(classifier: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """m(x) = argmax softmax(M(x)), computed in evaluation mode."""
    was_training = classifier.training
    classifier.eval()
    try:
        logits, _ = classifier(images)
    finally:
        classifier.train(was_training)
    return pseudo_label(softmax_probs(logits))


def sample_replay(
    gen: nn.Module,
    classifier: nn.Module,
    t: int,
    batch_size: int,
    label_prior: Union[Sequence[float], np.ndarray, torch.Tensor],
    seed: SeedLike,
    replay_domains: Optional[int] = None,
) -> ReplayBatch:
    """
    A pseudo-labeled batch of synthetic images from previous domains.

    Args:
        gen: Generator (or snapshot) covering at least the replayed domains
        classifier: The current classifier; supplies the pseudo-labels
        t: Current domain index; tau is drawn from 0..t-1
        batch_size: Number of samples
        label_prior: Source class frequencies for y
        seed: Integer seed or a torch.Generator to draw from
        replay_domains: Draw tau from 0..replay_domains-1 instead (source-only
            replay uses 1)

    Raises:
        PreconditionError: t == 0, or the generator does not cover the range
    """
    if t < 1:
        raise PreconditionError("nothing to replay at t = 0")
    upper = t if replay_domains is None else replay_domains
    if not 1 <= upper <= t:
        raise ValidationError(f"replay_domains must lie in [1, {t}], got {upper}")
    covered = int(getattr(gen, "num_domains", upper))
    if covered < upper:
        raise PreconditionError(
            f"the generator covers domains 0..{covered - 1}, replay needs 0..{upper - 1}"
        )
    generator = _as_generator(seed)
    y, tau = sample_conditions(batch_size, upper, label_prior, generator)
    z = torch.randn(batch_size, gen.noise_dim, generator=generator)
    device = _module_device(gen)
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            images = gen(z.to(device), y.to(device), tau.to(device))
    finally:
        gen.train(was_training)
    images = images.to(_module_device(classifier))
    return ReplayBatch(
        images=images,
        domain_indices=tau.to(images.device),
        conditioning_labels=y.to(images.device),
        pseudo_labels=pseudo_label_images(classifier, images),
    )


def image_distillation(
    gen: nn.Module,
    gen_prev: nn.Module,
    z: torch.Tensor,
    y: torch.Tensor,
    tau: torch.Tensor,
    t: Optional[int] = None,
) -> torch.Tensor:
    """
    L_ID: mean |G(z, y, tau) - G_p(z, y, tau)| over batch, channels and pixels.

    Raises:
        ValidationError: Some tau >= t (only previous domains are distilled)
    """
    if t is not None and tau.numel() and int(tau.max()) >= t:
        raise ValidationError(f"image distillation covers domains < {t}, got tau={int(tau.max())}")
    current = gen(z, y, tau)
    with torch.no_grad():
        previous = gen_prev(z, y, tau)
    return image_distillation_loss(current, previous)
