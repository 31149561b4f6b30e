"""
Synthetic desk-scale domain sequences.

Each class is an oriented grating with a class-specific envelope, so the class
is visible in the image structure. Each domain re-renders that structure with
its own colour palette, blur and noise style, which produces a consistent
appearance shift between domains (the kind of stain/scanner shift seen between
pathology sites) while leaving the class evidence intact.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from mfa_replay.data.types import (
    ClassTaxonomy,
    DomainDataset,
    DomainSequence,
    SealedLabels,
    make_splits,
)
from mfa_replay.errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DomainStyle:
    low: Tuple[float, float, float]
    high: Tuple[float, float, float]
    blur_sigma: float
    noise: str
    noise_level: float


# The first three domains mimic a source and two increasingly distant sites
_FIXED_STYLES: Tuple[DomainStyle, ...] = (
    DomainStyle((0.35, 0.10, 0.45), (0.95, 0.75, 0.90), 0.0, "gaussian", 0.05),
    DomainStyle((0.55, 0.15, 0.15), (1.00, 0.85, 0.70), 1.0, "salt_pepper", 0.04),
    DomainStyle((0.85, 0.80, 0.95), (0.20, 0.05, 0.35), 0.5, "speckle", 0.15),
)


def domain_style(domain: int, seed: int) -> DomainStyle:
    if domain < len(_FIXED_STYLES):
        return _FIXED_STYLES[domain]
    rng = np.random.default_rng([seed, 10_000 + domain])
    low = tuple(float(v) for v in rng.uniform(0.0, 0.6, size=3))
    high = tuple(float(v) for v in rng.uniform(0.4, 1.0, size=3))
    noise = ("gaussian", "salt_pepper", "speckle")[domain % 3]
    return DomainStyle(low, high, float(rng.uniform(0.0, 1.2)), noise, float(rng.uniform(0.03, 0.12)))  # type: ignore[arg-type]


def _class_structure(
    labels: np.ndarray, num_classes: int, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Grayscale structure maps in [0, 1], shape N x H x W."""
    n = len(labels)
    coords = np.linspace(-1.0, 1.0, size)
    v, u = np.meshgrid(coords, coords, indexing="ij")
    theta = np.pi * labels / num_classes + rng.normal(0.0, 0.05, size=n)
    freq = 1.5 + 1.5 * (labels % 2) + rng.uniform(-0.2, 0.2, size=n)
    phase = rng.uniform(0.0, 2 * np.pi, size=n)
    shift = rng.uniform(-0.2, 0.2, size=(n, 2))
    proj = (u[None] - shift[:, 0, None, None]) * np.cos(theta)[:, None, None] + (
        v[None] - shift[:, 1, None, None]
    ) * np.sin(theta)[:, None, None]
    grating = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    radius = np.sqrt((u[None] - shift[:, 0, None, None]) ** 2 + (v[None] - shift[:, 1, None, None]) ** 2)
    # Envelope: even classes fill a disk, odd classes a ring
    ring = (labels % 2 == 1)[:, None, None]
    envelope = np.where(ring, np.exp(-((radius - 0.6) ** 2) / 0.08), np.exp(-(radius**2) / 0.5))
    return 0.5 + 0.5 * grating * envelope


def _render(structure: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """Colourise, blur and add noise; returns N x 3 x H x W in [0, 1]."""
    low = np.asarray(style.low)[None, :, None, None]
    high = np.asarray(style.high)[None, :, None, None]
    img = low + (high - low) * structure[:, None]
    if style.blur_sigma > 0:
        img = gaussian_filter(img, sigma=(0, 0, style.blur_sigma, style.blur_sigma))
    if style.noise == "gaussian":
        img = img + rng.normal(0.0, style.noise_level, size=img.shape)
    elif style.noise == "salt_pepper":
        mask = rng.uniform(size=img.shape[:1] + img.shape[2:]) < style.noise_level
        salt = rng.uniform(size=mask.shape) < 0.5
        img = np.where(mask[:, None], salt[:, None].astype(img.dtype), img)
    elif style.noise == "speckle":
        img = img * (1.0 + rng.normal(0.0, style.noise_level, size=img.shape))
    return np.clip(img, 0.0, 1.0)


def _balanced_labels(n: int, classes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(classes, dtype=np.int64)[np.arange(n) % len(classes)]
    return labels[rng.permutation(n)]


def synth_toy_sequence(
    num_domains: int,
    num_classes: int,
    samples_per_domain: int,
    seed: int,
    image_size: int = 32,
    drop_classes: Sequence[int] = (),
    split_ratios: Sequence[float] = (0.7, 0.15, 0.15),
) -> DomainSequence:
    """
    Generate a deterministic synthetic domain sequence.

    Args:
        num_domains: Number of domains including the source (>= 2)
        num_classes: Number of classes (>= 2)
        samples_per_domain: Images per domain (>= num_classes)
        seed: Same seed, bit-identical sequence
        image_size: Square image side
        drop_classes: Classes absent from the last domain (partial-set target)
        split_ratios: train/val/test fractions

    Returns:
        DomainSequence with labels on domain 0 only; targets keep sealed labels
    """
    if num_domains < 2:
        raise ValidationError("a sequence needs at least 2 domains")
    if num_classes < 2:
        raise ValidationError("a sequence needs at least 2 classes")
    if samples_per_domain < num_classes:
        raise ValidationError(
            f"samples_per_domain ({samples_per_domain}) must be >= num_classes ({num_classes})"
        )
    dropped = sorted(set(int(c) for c in drop_classes))
    if any(c < 0 or c >= num_classes for c in dropped):
        raise ValidationError(f"drop_classes {dropped} outside [0, {num_classes})")
    if len(dropped) >= num_classes:
        raise ValidationError("the last domain must keep at least one class")

    taxonomy = ClassTaxonomy.numbered(num_classes)
    datasets: List[DomainDataset] = []
    for domain in range(num_domains):
        rng = np.random.default_rng([seed, domain])
        classes = list(range(num_classes))
        if domain == num_domains - 1 and dropped:
            classes = [c for c in classes if c not in dropped]
        labels = _balanced_labels(samples_per_domain, classes, rng)
        structure = _class_structure(labels, num_classes, image_size, rng)
        pixels = _render(structure, domain_style(domain, seed), rng)
        images = torch.from_numpy((pixels * 2.0 - 1.0).astype(np.float32))
        label_tensor = torch.from_numpy(labels)
        splits = make_splits(samples_per_domain, split_ratios, seed + domain, strata=labels)
        datasets.append(
            DomainDataset(
                domain_index=domain,
                taxonomy=taxonomy,
                images=images,
                sample_ids=tuple(f"d{domain}_{i:06d}" for i in range(samples_per_domain)),
                splits=splits,
                labels=label_tensor if domain == 0 else None,
                sealed_labels=None if domain == 0 else SealedLabels(label_tensor),
            )
        )
        logger.debug(
            "Synthesized toy domain",
            extra={"domain": domain, "classes": classes, "samples": samples_per_domain},
        )
    return DomainSequence(source=datasets[0], targets=tuple(datasets[1:]))
