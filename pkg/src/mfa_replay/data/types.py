"""
Domain data types: class taxonomy, per-domain datasets and domain sequences.

Images are stored as a single float32 tensor laid out N x C x H x W with pixel
values in [-1, 1] (the range of the tanh-bounded generator). Only the source
domain exposes labels to training code; targets keep their ground truth in a
SealedLabels side-channel that only the evaluation package opens.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset

from mfa_replay.config import RuntimeConfig
from mfa_replay.errors import ValidationError

SPLIT_NAMES: Tuple[str, ...] = ("train", "val", "test")
PIXEL_TOLERANCE = 1e-5


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered class names shared by every domain of an experiment."""

    names: Tuple[str, ...]

    def __post_init__(self) -> None:
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValidationError(f"A taxonomy needs at least 2 classes, got {len(names)}")
        if any(not n for n in names):
            raise ValidationError("Class names must be non-empty")
        if len(set(names)) != len(names):
            raise ValidationError(f"Class names must be unique: {names}")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"Unknown class '{name}'") from None

    @classmethod
    def numbered(cls, num_classes: int) -> "ClassTaxonomy":
        return cls(tuple(f"class_{i}" for i in range(num_classes)))


class SealedLabels:
    """Ground-truth labels of an unlabeled domain, readable only for scoring."""

    __slots__ = ("_labels",)

    def __init__(self, labels: torch.Tensor):
        self._labels = labels.detach().to(torch.long).clone()

    def reveal(self) -> torch.Tensor:
        # Callers: mfa_replay.evaluation only
        return self._labels

    def __len__(self) -> int:
        return int(self._labels.numel())

    def __repr__(self) -> str:
        return f"SealedLabels(n={len(self)})"


def make_splits(
    num_samples: int,
    ratios: Sequence[float],
    seed: int,
    strata: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """
    Deterministic (stratified) train/val/test partition of sample indices.

    Args:
        num_samples: Dataset size
        ratios: (train, val, test) fractions summing to 1
        seed: Split seed; identical seeds give identical partitions
        strata: Optional per-sample group (class label) to stratify on

    Returns:
        {"train": idx, "val": idx, "test": idx}, each sorted ascending
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValidationError(f"split ratios must be three non-negative numbers summing to 1: {ratios}")
    rng = np.random.default_rng(seed)
    groups = np.zeros(num_samples, dtype=np.int64) if strata is None else np.asarray(strata)
    parts: Dict[str, list] = {name: [] for name in SPLIT_NAMES}
    for group in np.unique(groups):
        members = np.flatnonzero(groups == group)
        members = members[rng.permutation(len(members))]
        n_val = int(round(len(members) * ratios[1]))
        n_test = int(round(len(members) * ratios[2]))
        n_val = min(n_val, len(members))
        n_test = min(n_test, len(members) - n_val)
        parts["test"].append(members[:n_test])
        parts["val"].append(members[n_test : n_test + n_val])
        parts["train"].append(members[n_test + n_val :])
    return {
        name: np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        for name, chunks in parts.items()
    }


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """One domain's images, split assignment and (source only) labels."""

    domain_index: int
    taxonomy: ClassTaxonomy
    images: torch.Tensor
    sample_ids: Tuple[str, ...]
    splits: Mapping[str, np.ndarray]
    labels: Optional[torch.Tensor] = None
    sealed_labels: Optional[SealedLabels] = field(default=None, repr=False)
    root: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.domain_index < 0:
            raise ValidationError("domain_index must be non-negative")
        images = self.images
        if images.dim() != 4:
            raise ValidationError(f"images must be N x C x H x W, got shape {tuple(images.shape)}")
        n = images.shape[0]
        if len(self.sample_ids) != n:
            raise ValidationError("one sample id per image is required")
        if n and (images.min() < -1 - PIXEL_TOLERANCE or images.max() > 1 + PIXEL_TOLERANCE):
            raise ValidationError("pixel values must lie in [-1, 1]")
        for labels in (self.labels, self.sealed_labels.reveal() if self.sealed_labels else None):
            if labels is None:
                continue
            if labels.shape != (n,):
                raise ValidationError("labels must have one entry per image")
            if n and (labels.min() < 0 or labels.max() >= self.taxonomy.size):
                raise ValidationError(f"labels must lie in [0, {self.taxonomy.size})")
        seen: set = set()
        for name in SPLIT_NAMES:
            idx = self.splits.get(name)
            if idx is None:
                raise ValidationError(f"missing split '{name}'")
            as_set = set(int(i) for i in idx)
            if seen & as_set:
                raise ValidationError("splits must be disjoint")
            if any(i < 0 or i >= n for i in as_set):
                raise ValidationError("split index out of range")
            seen |= as_set
        images.requires_grad_(False)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        c, h, w = self.images.shape[1:]
        return int(c), int(h), int(w)

    @property
    def label_prior(self) -> np.ndarray:
        """Per-class frequency vector of the labeled data (sums to 1)."""
        if self.labels is None:
            raise ValidationError(f"domain {self.domain_index} is unlabeled; it has no label prior")
        return label_prior(self.labels, self.taxonomy.size)

    def split_images(self, split: str) -> torch.Tensor:
        return self.images[torch.as_tensor(self.splits[split], dtype=torch.long)]

    def split_labels(self, split: str) -> Optional[torch.Tensor]:
        if self.labels is None:
            return None
        return self.labels[torch.as_tensor(self.splits[split], dtype=torch.long)]

    def split_ids(self, split: str) -> Tuple[str, ...]:
        return tuple(self.sample_ids[int(i)] for i in self.splits[split])


def label_prior(labels: torch.Tensor, num_classes: int) -> np.ndarray:
    counts = np.bincount(labels.cpu().numpy().astype(np.int64), minlength=num_classes)
    total = counts.sum()
    if total == 0:
        raise ValidationError("cannot compute a label prior from zero labels")
    return counts.astype(np.float64) / float(total)


@dataclass(frozen=True, eq=False)
class DomainSequence:
    """A labeled source followed by an ordered list of unlabeled targets."""

    source: DomainDataset
    targets: Tuple[DomainDataset, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))
        domains = self.domains
        if [d.domain_index for d in domains] != list(range(len(domains))):
            raise ValidationError("domain indices must be 0..T contiguous")
        if not self.source.is_labeled:
            raise ValidationError("the source domain must carry labels")
        if any(t.is_labeled for t in self.targets):
            raise ValidationError("only the source domain may carry labels")
        shapes = {d.image_shape for d in domains}
        if len(shapes) != 1:
            raise ValidationError(f"all domains must share one image shape, got {shapes}")
        if any(d.taxonomy != self.source.taxonomy for d in domains):
            raise ValidationError("all domains must share the source taxonomy")

    @property
    def domains(self) -> Tuple[DomainDataset, ...]:
        return (self.source, *self.targets)

    @property
    def taxonomy(self) -> ClassTaxonomy:
        return self.source.taxonomy

    def __len__(self) -> int:
        return 1 + len(self.targets)


# ============ BATCHING ============


def batches(
    dataset: DomainDataset,
    split: str,
    batch_size: int,
    seed: int,
    shuffle: bool = True,
    drop_last: bool = False,
) -> DataLoader:
    """
    DataLoader over one split. Yields (images, labels) for the source and
    (images,) for unlabeled domains.
    """
    images = dataset.split_images(split)
    labels = dataset.split_labels(split)
    tensors = (images,) if labels is None else (images, labels)
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return DataLoader(
        TensorDataset(*tensors),
        batch_size=batch_size,
        shuffle=shuffle,
        drop_last=drop_last and len(images) >= batch_size,
        generator=generator,
        num_workers=RuntimeConfig.NUM_WORKERS,
    )


def cycle_batches(
    dataset: DomainDataset, split: str, batch_size: int, seed: int
) -> Iterator[Tuple[torch.Tensor, ...]]:
    """Endless shuffled batches; each pass is reseeded with seed + pass index."""
    epoch = 0
    while True:
        loader = batches(dataset, split, batch_size, seed + epoch, shuffle=True, drop_last=True)
        produced = False
        for batch in loader:
            produced = True
            yield tuple(batch)
        if not produced:
            raise ValidationError(f"split '{split}' of domain {dataset.domain_index} is empty")
        epoch += 1
