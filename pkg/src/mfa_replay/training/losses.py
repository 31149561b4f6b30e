"""
Training objectives of the four phases.

Source GAN (generator / discriminator):
    L_G = E[softplus(-D(h(G(z, y, 0)), y, 0))]
    L_D = E[softplus(D(h(x'), y, 0))] + E[softplus(-D(h(x), y, 0))] + lambda_r1 * R1

Classifier adaptation, D has no domain input and judges pseudo-labels:
    L_D = BCE(sigmoid(D(h(x_t))), 0) + BCE(sigmoid(D(h(x'_tau))), 1) + lambda_r1 * R1
    L_M = BCE(sigmoid(D(h(x_t))), 1) + lambda_ld * |f_p(h_p(x')) - f(h(x'))|

GAN adaptation over domains 0..t:
    L_G = E[softplus(-D(h(x'_tau), m(x'_tau), tau))] + lambda_id * |G - G_p|
    L_D = E[softplus(D(fake))] + E[softplus(-D(G_p samples))] + E[softplus(-D(real x_t))]
          + lambda_r1 * R1

The BCE terms are computed from logits (binary_cross_entropy_with_logits),
which equals -log(sigmoid) / -log(1 - sigmoid) without the overflow.
"""

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from mfa_replay.errors import NumericError, ValidationError
from mfa_replay.models.classifier import logit_distillation

Taps = Mapping[str, torch.Tensor]
DiscriminatorFn = Callable[..., torch.Tensor]


# ============ BUILDING BLOCKS ============


def r1_penalty(outputs: torch.Tensor, features: Iterable[torch.Tensor]) -> torch.Tensor:
    """
    Mean over the batch of the squared gradient norm of D w.r.t. its inputs.

    Args:
        outputs: D logits, one per sample
        features: The real feature tensors the gradient is taken against
            (leaf tensors with requires_grad=True)

    Raises:
        NumericError: outputs are not connected to the autograd graph
    """
    inputs = [f for f in features]
    if not inputs:
        raise NumericError("r1_penalty needs at least one feature tensor")
    if not outputs.requires_grad or not any(f.requires_grad for f in inputs):
        raise NumericError("r1_penalty: discriminator output has no gradient path to its inputs")
    grads = torch.autograd.grad(
        outputs=outputs.sum(),
        inputs=[f for f in inputs if f.requires_grad],
        create_graph=True,
        allow_unused=True,
    )
    n = outputs.shape[0]
    total = outputs.new_zeros(n)
    for grad in grads:
        if grad is not None:
            total = total + grad.reshape(n, -1).pow(2).sum(dim=1)
    return total.mean()


def softplus_generator_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logits).mean()


def softplus_discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def leaf_taps(taps: Taps, names: Sequence[str]) -> Dict[str, torch.Tensor]:
    """Detached copies of the named taps that accept gradients (R1 inputs)."""
    missing = [n for n in names if n not in taps]
    if missing:
        raise ValidationError(f"missing taps {missing}")
    return {n: taps[n].detach().requires_grad_(True) for n in names}


def detach_taps(taps: Taps, names: Sequence[str]) -> Dict[str, torch.Tensor]:
    return {n: taps[n].detach() for n in names}


def _tap_names(disc: nn.Module, taps: Taps) -> Sequence[str]:
    return list(getattr(disc, "tap_order", list(taps)))


# ============ SOURCE GAN ============


def source_discriminator_loss(
    disc: DiscriminatorFn,
    fake_taps: Taps,
    fake_labels: torch.Tensor,
    real_taps: Taps,
    real_labels: torch.Tensor,
    lambda_r1: float,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """L_D on the source domain. real_taps must be leaf tensors for R1."""
    names = _tap_names(disc, real_taps)
    domain = torch.zeros_like(real_labels)
    fake_scores = disc(detach_taps(fake_taps, names), fake_labels, torch.zeros_like(fake_labels))
    real_scores = disc(real_taps, real_labels, domain)
    adversarial = softplus_discriminator_loss(real_scores, fake_scores)
    r1 = r1_penalty(real_scores, [real_taps[n] for n in names]) if lambda_r1 > 0 else real_scores.new_zeros(())
    loss = adversarial + lambda_r1 * r1
    return loss, {"d_adv": float(adversarial), "r1": float(r1)}


def source_generator_loss(
    disc: DiscriminatorFn, fake_taps: Taps, fake_labels: torch.Tensor
) -> torch.Tensor:
    return softplus_generator_loss(disc(fake_taps, fake_labels, torch.zeros_like(fake_labels)))


def adversarial_losses_source(
    gen: nn.Module,
    disc: nn.Module,
    classifier: nn.Module,
    real_images: torch.Tensor,
    real_labels: Optional[torch.Tensor],
    z: torch.Tensor,
    fake_labels: torch.Tensor,
    lambda_r1: float,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    (L_G, L_D) of the source GAN on one batch.

    The classifier only provides features; it is expected to be frozen.

    Raises:
        ValidationError: real_labels is None
    """
    if real_labels is None:
        raise ValidationError("source GAN training needs labeled real images")
    domain = torch.zeros_like(fake_labels)
    fake_images = gen(z, fake_labels, domain)
    _, fake_taps = classifier(fake_images)
    with torch.no_grad():
        _, real_taps = classifier(real_images)
    names = _tap_names(disc, real_taps)
    loss_g = source_generator_loss(disc, fake_taps, fake_labels)
    loss_d, _ = source_discriminator_loss(
        disc, fake_taps, fake_labels, leaf_taps(real_taps, names), real_labels, lambda_r1
    )
    return loss_g, loss_d


# ============ CLASSIFIER ADAPTATION ============


def alignment_discriminator_loss(
    disc: DiscriminatorFn,
    target_taps: Taps,
    target_pseudo: torch.Tensor,
    replay_taps: Taps,
    replay_pseudo: torch.Tensor,
    lambda_r1: float,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    D learns to output 0 for current-target features and 1 for replayed
    previous-domain features; no domain label. R1 is taken on the real
    target features, so target_taps must be leaf tensors when lambda_r1 > 0.
    """
    names = _tap_names(disc, target_taps)
    target_scores = disc(target_taps, target_pseudo)
    replay_scores = disc(detach_taps(replay_taps, names), replay_pseudo)
    bce = F.binary_cross_entropy_with_logits(
        target_scores, torch.zeros_like(target_scores)
    ) + F.binary_cross_entropy_with_logits(replay_scores, torch.ones_like(replay_scores))
    if lambda_r1 > 0:
        r1 = r1_penalty(target_scores, [target_taps[n] for n in names])
    else:
        r1 = target_scores.new_zeros(())
    return bce + lambda_r1 * r1, {"d_bce": float(bce), "r1": float(r1)}


def alignment_confusion_loss(disc: DiscriminatorFn, target_taps: Taps, target_pseudo: torch.Tensor) -> torch.Tensor:
    """-log sigmoid(D(h(x_t), m(x_t))): the classifier tries to look like replay."""
    scores = disc(target_taps, target_pseudo)
    return F.binary_cross_entropy_with_logits(scores, torch.ones_like(scores))


def alignment_classifier_loss(
    disc: DiscriminatorFn,
    target_taps: Taps,
    target_pseudo: torch.Tensor,
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    lambda_ld: float,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Confusion term on target features plus weighted logit distillation on replay."""
    confusion = alignment_confusion_loss(disc, target_taps, target_pseudo)
    distill = logit_distillation(student_logits, teacher_logits.detach())
    return confusion + lambda_ld * distill, {"confusion": float(confusion), "ld": float(distill)}


# ============ GAN ADAPTATION ============


def image_distillation_loss(current: torch.Tensor, previous: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference between G and G_p outputs."""
    if current.shape != previous.shape:
        raise ValidationError(f"image shapes differ: {tuple(current.shape)} vs {tuple(previous.shape)}")
    return (current - previous.detach()).abs().mean()


def gan_adaptation_generator_loss(
    disc: DiscriminatorFn,
    fake_taps: Taps,
    fake_pseudo: torch.Tensor,
    fake_domains: torch.Tensor,
    distill_current: Optional[torch.Tensor],
    distill_previous: Optional[torch.Tensor],
    lambda_id: float,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Adversarial term over domains 0..t plus lambda_id * L_ID over 0..t-1."""
    adversarial = softplus_generator_loss(disc(fake_taps, fake_pseudo, fake_domains))
    if distill_current is None or distill_previous is None:
        distill = adversarial.new_zeros(())
    else:
        distill = image_distillation_loss(distill_current, distill_previous)
    return adversarial + lambda_id * distill, {"g_adv": float(adversarial), "id": float(distill)}


def gan_adaptation_discriminator_loss(
    disc: DiscriminatorFn,
    fake_taps: Taps,
    fake_pseudo: torch.Tensor,
    fake_domains: torch.Tensor,
    real_taps: Taps,
    real_pseudo: torch.Tensor,
    real_domains: torch.Tensor,
    num_replayed: int,
    lambda_r1: float,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    L_D of GAN adaptation.

    The "real" side is one batch: the first `num_replayed` rows are G_p
    samples of previous domains, the rest are real images of the current
    domain. Each part is averaged on its own; R1 covers the whole real side.
    """
    names = _tap_names(disc, real_taps)
    fake_scores = disc(detach_taps(fake_taps, names), fake_pseudo, fake_domains)
    real_scores = disc(real_taps, real_pseudo, real_domains)
    loss = F.softplus(fake_scores).mean()
    replayed, current = real_scores[:num_replayed], real_scores[num_replayed:]
    parts = {"d_fake": float(loss)}
    if replayed.numel():
        replay_term = F.softplus(-replayed).mean()
        loss = loss + replay_term
        parts["d_replay"] = float(replay_term)
    if current.numel():
        current_term = F.softplus(-current).mean()
        loss = loss + current_term
        parts["d_real"] = float(current_term)
    if lambda_r1 > 0:
        r1 = r1_penalty(real_scores, [real_taps[n] for n in names])
    else:
        r1 = real_scores.new_zeros(())
    parts["r1"] = float(r1)
    return loss + lambda_r1 * r1, parts


# ============ EARLY STOPPING ============


def infomax_surrogate(probs: torch.Tensor) -> torch.Tensor:
    """
    Mean per-sample entropy minus the entropy of the mean prediction.

    Lower is better; the minimum -ln L is reached by confident predictions
    spread evenly over the classes.

    Raises:
        ValidationError: Empty batch
    """
    if probs.dim() != 2 or probs.shape[0] == 0:
        raise ValidationError("infomax_surrogate needs a non-empty N x L batch")
    per_sample = torch.special.entr(probs).sum(dim=1).mean()
    marginal = torch.special.entr(probs.mean(dim=0)).sum()
    return per_sample - marginal
