"""
The continual training state carried from one phase to the next, and its
on-disk form.

A run directory holds two bundles:

    classifier.ckpt   classifier (+ alignment discriminator), coverage 0:t
    gan.ckpt          generator, EMA generator, GAN discriminator,
                      coverage 0:(domains covered - 1)

Together with the source label prior (kept in the bundle metadata) they are
everything `adapt --domain t` needs; no earlier domain's data is read.
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch.nn as nn

from mfa_replay.config import RuntimeConfig, TrainingConfig, config_hash
from mfa_replay.errors import CheckpointError, PreconditionError
from mfa_replay.models.classifier import Classifier, load_pretrained_backbone
from mfa_replay.models.discriminator import Discriminator
from mfa_replay.models.generator import Generator
from mfa_replay.models.snapshot import Snapshot, snapshot
from mfa_replay.persistence.checkpoints import (
    CheckpointBundle,
    coverage_tag,
    load_checkpoint,
    load_module,
    module_tensors,
    save_checkpoint,
)
from mfa_replay.training.ema import ema_copy

logger = logging.getLogger(__name__)

CLASSIFIER_CHECKPOINT = "classifier.ckpt"
GAN_CHECKPOINT = "gan.ckpt"


@dataclass
class PhaseState:
    """
    Models and bookkeeping of a continual run at domain t.

    classifier_snapshot (M_p) and generator_snapshot (G_p) exist once the run
    has moved past the source (t >= 1).
    """

    t: int
    classifier: Classifier
    label_prior: np.ndarray
    class_names: Tuple[str, ...]
    generator: Optional[Generator] = None
    ema_generator: Optional[Generator] = None
    discriminator: Optional[Discriminator] = None
    alignment_discriminator: Optional[Discriminator] = None
    classifier_snapshot: Optional[Snapshot] = None
    generator_snapshot: Optional[Snapshot] = None
    steps: Dict[str, int] = field(default_factory=dict)
    best: Dict[str, float] = field(default_factory=dict)
    completed: Dict[int, List[str]] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def covered_domains(self) -> int:
        """Domains the replay generator can produce (0 before the source GAN)."""
        return self.ema_generator.num_domains if self.ema_generator is not None else 0

    def count(self, key: str, n: int = 1) -> int:
        self.steps[key] = self.steps.get(key, 0) + n
        return self.steps[key]

    def mark_completed(self, phase: str) -> None:
        """Record that phase finished for the current domain."""
        done = self.completed.setdefault(self.t, [])
        if phase not in done:
            done.append(phase)

    def has_completed(self, phase: str, t: Optional[int] = None) -> bool:
        return phase in self.completed.get(self.t if t is None else t, ())

    def refresh_classifier_snapshot(self) -> None:
        self.classifier_snapshot = snapshot(self.classifier)

    def refresh_generator_snapshot(self) -> None:
        if self.ema_generator is not None:
            self.generator_snapshot = snapshot(self.ema_generator)

    def begin_domain(self, t: int) -> None:
        """
        Move to target domain t and freeze the models trained so far.

        Raises:
            PreconditionError: t is not the next domain
        """
        if t != self.t + 1:
            raise PreconditionError(f"the state is at domain {self.t}; the next domain is {self.t + 1}, not {t}")
        self.t = t
        self.refresh_classifier_snapshot()
        self.refresh_generator_snapshot()


# ============ BUILDERS ============


def _to_device(module: nn.Module) -> nn.Module:
    return module.to(RuntimeConfig.resolve_device())


def build_classifier(config: TrainingConfig, num_classes: int, image_shape: Sequence[int]) -> Classifier:
    classifier = Classifier(num_classes, image_shape, config.architecture)
    if config.pretrained_backbone is not None:
        load_pretrained_backbone(classifier, config.pretrained_backbone)
    return _to_device(classifier)


def build_gan(
    config: TrainingConfig, classifier: Classifier, num_domains: int = 1
) -> Tuple[Generator, Discriminator]:
    """A generator and a GAN discriminator on the configured taps."""
    generator = Generator(classifier.num_classes, num_domains, classifier.image_shape, config.architecture)
    taps = [classifier.tap(name) for name in config.gan_taps()]
    discriminator = Discriminator(taps, classifier.num_classes, num_domains, config.architecture)
    return _to_device(generator), _to_device(discriminator)


def alignment_discriminator_for(config: TrainingConfig, state: PhaseState) -> Discriminator:
    """
    Discriminator for classifier adaptation.

    With multi-scale aggregation it starts from the GAN discriminator's
    weights. The single-tap variant judges another tap than the GAN
    discriminator, so it is its own network, created once and kept.
    """
    if not config.disable_mfa:
        if state.discriminator is None:
            raise PreconditionError("classifier adaptation needs the discriminator of a trained GAN")
        return copy.deepcopy(state.discriminator)
    if state.alignment_discriminator is None:
        taps = [state.classifier.tap(name) for name in config.uda_taps()]
        state.alignment_discriminator = _to_device(
            Discriminator(taps, state.num_classes, 1, config.architecture)
        )
    return state.alignment_discriminator


# ============ PERSISTENCE ============


def _architecture(config: TrainingConfig, state: PhaseState) -> Dict:
    return {
        "model": config.architecture.model_dump(mode="json"),
        "num_classes": state.num_classes,
        "image_shape": list(state.classifier.image_shape),
        "gan_taps": config.gan_taps(),
        "uda_taps": config.uda_taps(),
        "num_domains": state.covered_domains,
        "alignment_num_domains": (
            state.alignment_discriminator.num_domains if state.alignment_discriminator is not None else 0
        ),
    }


def save_state(state: PhaseState, config: TrainingConfig, directory: Union[str, Path]) -> Dict[str, Path]:
    """
    Write classifier.ckpt and (once a GAN exists) gan.ckpt.

    Returns:
        {"classifier": path, "gan": path}
    """
    directory = Path(directory)
    digest = config_hash(config)
    architecture = _architecture(config, state)
    metadata = {
        "label_prior": [float(p) for p in state.label_prior],
        "class_names": list(state.class_names),
        "steps": dict(state.steps),
        "best": dict(state.best),
        "completed": {str(t): list(phases) for t, phases in state.completed.items()},
        "seed": config.seed,
    }
    tensors = module_tensors("classifier", state.classifier)
    if state.alignment_discriminator is not None:
        tensors.update(module_tensors("alignment_discriminator", state.alignment_discriminator))
    paths = {
        "classifier": save_checkpoint(
            CheckpointBundle(
                kind="classifier",
                tensors=tensors,
                architecture=architecture,
                coverage=coverage_tag(state.t),
                step=sum(state.steps.values()),
                config_hash=digest,
                metadata=metadata,
            ),
            directory / CLASSIFIER_CHECKPOINT,
        )
    }
    if state.generator is not None and state.ema_generator is not None and state.discriminator is not None:
        gan_tensors = {
            **module_tensors("generator", state.generator),
            **module_tensors("ema_generator", state.ema_generator),
            **module_tensors("discriminator", state.discriminator),
        }
        paths["gan"] = save_checkpoint(
            CheckpointBundle(
                kind="gan",
                tensors=gan_tensors,
                architecture=architecture,
                coverage=coverage_tag(state.covered_domains - 1),
                step=state.steps.get("train_source_gan", 0) + state.steps.get("adapt_gan", 0),
                config_hash=digest,
                metadata=metadata,
            ),
            directory / GAN_CHECKPOINT,
        )
    return paths


def load_state(
    config: TrainingConfig, directory: Union[str, Path], check_hash: bool = True
) -> PhaseState:
    """
    Rebuild a PhaseState from a run directory.

    Raises:
        FileNotFoundError: classifier.ckpt is missing
        CheckpointHashError: The bundles were written under another configuration
        CheckpointError: The bundles do not fit the configured architecture
    """
    directory = Path(directory)
    expected = config_hash(config) if check_hash else None
    bundle = load_checkpoint(directory / CLASSIFIER_CHECKPOINT, expected, expected_kind="classifier")
    arch = bundle.architecture
    meta = bundle.metadata
    if arch.get("model") != config.architecture.model_dump(mode="json"):
        raise CheckpointError(f"{directory} was trained with another architecture")

    classifier = Classifier(arch["num_classes"], arch["image_shape"], config.architecture)
    load_module(classifier, bundle, "classifier")
    state = PhaseState(
        t=bundle.last_domain,
        classifier=_to_device(classifier),
        label_prior=np.asarray(meta["label_prior"], dtype=np.float64),
        class_names=tuple(meta["class_names"]),
        steps={k: int(v) for k, v in meta.get("steps", {}).items()},
        best={k: float(v) for k, v in meta.get("best", {}).items()},
        completed={int(t): list(phases) for t, phases in meta.get("completed", {}).items()},
    )
    if bundle.has_module("alignment_discriminator"):
        taps = [classifier.tap(name) for name in arch["uda_taps"]]
        align = Discriminator(taps, arch["num_classes"], max(1, arch["alignment_num_domains"]), config.architecture)
        state.alignment_discriminator = _to_device(load_module(align, bundle, "alignment_discriminator"))

    gan_path = directory / GAN_CHECKPOINT
    if gan_path.exists():
        gan = load_checkpoint(gan_path, expected, expected_kind="gan")
        generator, discriminator = build_gan(config, classifier, gan.last_domain + 1)
        state.generator = _to_device(load_module(generator.cpu(), gan, "generator"))
        ema = ema_copy(generator)
        state.ema_generator = _to_device(load_module(ema.cpu(), gan, "ema_generator"))
        state.discriminator = _to_device(load_module(discriminator.cpu(), gan, "discriminator"))

    if state.t >= 1:
        state.refresh_classifier_snapshot()
        state.refresh_generator_snapshot()
    logger.info(
        f"Loaded state at domain {state.t} from {directory}",
        extra={"domain": state.t, "covered_domains": state.covered_domains},
    )
    return state
