"""Domain datasets, synthetic sequences and augmentation."""

from .augment import augment_batch
from .toy import synth_toy_sequence
from .types import (
    SPLIT_NAMES,
    ClassTaxonomy,
    DomainDataset,
    DomainSequence,
    SealedLabels,
    batches,
    cycle_batches,
    label_prior,
    make_splits,
)

__all__ = [
    "SPLIT_NAMES",
    "ClassTaxonomy",
    "DomainDataset",
    "DomainSequence",
    "SealedLabels",
    "augment_batch",
    "batches",
    "cycle_batches",
    "label_prior",
    "make_splits",
    "synth_toy_sequence",
]
