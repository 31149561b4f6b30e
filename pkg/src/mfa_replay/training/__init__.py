"""Training phases, losses, replay and the continual-run drivers."""

from .ema import ema_copy, ema_update
from .losses import (
    adversarial_losses_source,
    alignment_classifier_loss,
    alignment_confusion_loss,
    alignment_discriminator_loss,
    gan_adaptation_discriminator_loss,
    gan_adaptation_generator_loss,
    image_distillation_loss,
    infomax_surrogate,
    r1_penalty,
)
from .phases import (
    EarlyStopping,
    adapt_classifier,
    adapt_gan,
    sub_seed,
    surrogate_score,
    train_source_classifier,
    train_source_gan,
    warmup_cosine,
)
from .replay import ReplayBatch, image_distillation, pseudo_label_images, sample_conditions, sample_replay
from .sequence import adapt_domain, adapt_generator_to, adapt_to, grid_search, has_state, run_sequence, train_source
from .state import PhaseState, build_classifier, build_gan, load_state, save_state

__all__ = [
    "EarlyStopping",
    "PhaseState",
    "ReplayBatch",
    "adapt_classifier",
    "adapt_domain",
    "adapt_gan",
    "adapt_generator_to",
    "adapt_to",
    "adversarial_losses_source",
    "alignment_classifier_loss",
    "alignment_confusion_loss",
    "alignment_discriminator_loss",
    "build_classifier",
    "build_gan",
    "ema_copy",
    "ema_update",
    "gan_adaptation_discriminator_loss",
    "gan_adaptation_generator_loss",
    "grid_search",
    "has_state",
    "image_distillation",
    "image_distillation_loss",
    "infomax_surrogate",
    "load_state",
    "pseudo_label_images",
    "r1_penalty",
    "run_sequence",
    "sample_conditions",
    "sample_replay",
    "save_state",
    "sub_seed",
    "surrogate_score",
    "train_source",
    "train_source_classifier",
    "train_source_gan",
    "warmup_cosine",
]
