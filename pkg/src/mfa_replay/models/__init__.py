"""Classifier, generator, discriminator and frozen snapshots."""

from .classifier import (
    Classifier,
    TapSpec,
    cross_entropy,
    load_pretrained_backbone,
    logit_distillation,
    pool_tap,
    pooled_features,
    pseudo_label,
    softmax_probs,
)
from .discriminator import Discriminator, discriminate, mfa_aggregate, minibatch_stddev
from .generator import Generator, export_sample_sheet, generate
from .snapshot import ClassifierSnapshot, GeneratorSnapshot, Snapshot, snapshot

__all__ = [
    "Classifier",
    "ClassifierSnapshot",
    "Discriminator",
    "Generator",
    "GeneratorSnapshot",
    "Snapshot",
    "TapSpec",
    "cross_entropy",
    "discriminate",
    "export_sample_sheet",
    "generate",
    "load_pretrained_backbone",
    "logit_distillation",
    "mfa_aggregate",
    "minibatch_stddev",
    "pool_tap",
    "pooled_features",
    "pseudo_label",
    "snapshot",
    "softmax_probs",
]
