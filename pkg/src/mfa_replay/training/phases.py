"""
The four training phases of a continual run.

1. train_source_classifier  supervised cross-entropy on the labeled source
2. train_source_gan         generator + discriminator on classifier features
3. adapt_classifier         align target features with replayed features
4. adapt_gan                extend the generator to the new domain

Every phase alternates one discriminator step with one classifier/generator
step, logs step metrics through `log_metrics`, and draws all randomness from
sub-seeds of the configured seed.
"""

import copy
import logging
import math
import zlib
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from mfa_replay.config import OptimizerConfig, RuntimeConfig, TrainingConfig
from mfa_replay.data.augment import augment_batch
from mfa_replay.data.types import DomainDataset, batches, cycle_batches
from mfa_replay.errors import DivergenceError, NumericError, PreconditionError
from mfa_replay.evaluation.report import predict
from mfa_replay.models.classifier import Classifier, cross_entropy, softmax_probs
from mfa_replay.models.discriminator import Discriminator, select_taps
from mfa_replay.models.generator import Generator, export_sample_sheet
from mfa_replay.training.ema import ema_copy, ema_update
from mfa_replay.training.losses import (
    alignment_classifier_loss,
    alignment_discriminator_loss,
    gan_adaptation_discriminator_loss,
    gan_adaptation_generator_loss,
    infomax_surrogate,
    leaf_taps,
    source_discriminator_loss,
    source_generator_loss,
)
from mfa_replay.training.replay import pseudo_label_images, sample_conditions, sample_replay
from mfa_replay.training.state import (
    PhaseState,
    alignment_discriminator_for,
    build_classifier,
    build_gan,
    save_state,
)
from mfa_replay.utils.logging import log_metrics, log_phase
from mfa_replay.utils.seeding import seed_everything, torch_generator

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ============ HELPERS ============


def sub_seed(seed: int, name: str, *parts: int) -> int:
    """Deterministic 32-bit seed derived from the run seed, a stream name and indices."""
    entropy = [seed % 2**32, zlib.crc32(name.encode("utf-8")), *(p % 2**32 for p in parts)]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def warmup_cosine(total_steps: int, warmup_fraction: float) -> Callable[[int], float]:
    """LR factor: linear warmup, then cosine decay to zero at total_steps."""
    warmup = int(total_steps * warmup_fraction)

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return factor


def classifier_optimizer(
    module: nn.Module, lr: float, settings: OptimizerConfig, total_steps: int
) -> Tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LambdaLR]:
    optimizer = torch.optim.RAdam(module.parameters(), lr=lr, weight_decay=settings.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, warmup_cosine(max(1, total_steps), settings.warmup_fraction)
    )
    return optimizer, scheduler


def adam(module: nn.Module, lr: float, settings: OptimizerConfig) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=lr, betas=tuple(settings.adam_betas))


def set_trainable(module: nn.Module, flag: bool) -> None:
    for param in module.parameters():
        param.requires_grad_(flag)


def steps_per_epoch(config: TrainingConfig, dataset: DomainDataset, split: str = "train") -> int:
    available = max(1, len(dataset.splits[split]) // config.batch_size)
    return min(available, config.steps_per_epoch) if config.steps_per_epoch else available


def selection_split(dataset: DomainDataset) -> str:
    if len(dataset.splits["val"]):
        return "val"
    logger.warning(f"Domain {dataset.domain_index} has no validation split; selecting on train")
    return "train"


def _check_finite(phase: str, step: int, values: Mapping[str, float], **context) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NumericError(f"{phase}: non-finite loss at step {step}: {bad} ({context})")


def _guard_divergence(
    phase: str,
    step: int,
    values: Mapping[str, float],
    config: TrainingConfig,
    state: PhaseState,
    output_dir: Optional[PathLike],
) -> None:
    """Abort GAN training on a non-finite or exploding loss, saving the models first."""
    bad = {k: v for k, v in values.items() if not math.isfinite(v) or abs(v) > config.divergence_threshold}
    if not bad:
        return
    checkpoint = None
    if output_dir is not None:
        paths = save_state(state, config, Path(output_dir) / "diverged")
        checkpoint = paths.get("gan", paths["classifier"])
    raise DivergenceError(f"{phase} diverged at step {step}: {bad}", checkpoint_path=checkpoint)


class EarlyStopping:
    """Best (lowest) value seen so far and the weights that produced it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0
        self._weights: Optional[Dict[str, torch.Tensor]] = None

    def update(self, value: float, module: nn.Module, epoch: int) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            self._weights = copy.deepcopy(module.state_dict())
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience

    def restore(self, module: nn.Module) -> None:
        if self._weights is not None:
            module.load_state_dict(self._weights)


@torch.no_grad()
def validation_loss(
    classifier: nn.Module, dataset: DomainDataset, split: str, batch_size: int = 256, floor: float = 1e-12
) -> float:
    """Cross-entropy of a labeled split in evaluation mode."""
    logits, _ = predict(classifier, dataset.split_images(split), batch_size=batch_size)
    labels = dataset.split_labels(split)
    if labels is None:
        raise PreconditionError(f"domain {dataset.domain_index} has no labels for a validation loss")
    return float(cross_entropy(softmax_probs(logits), labels, floor=floor))


@torch.no_grad()
def surrogate_score(classifier: nn.Module, dataset: DomainDataset, split: str, batch_size: int = 256) -> float:
    """InfoMax surrogate of the classifier's predictions on a split (lower is better)."""
    logits, _ = predict(classifier, dataset.split_images(split), batch_size=batch_size)
    return float(infomax_surrogate(softmax_probs(logits.double())))


def _device() -> torch.device:
    return torch.device(RuntimeConfig.resolve_device())


# ============ SOURCE ============


@log_phase
def train_source_classifier(
    config: TrainingConfig,
    source: DomainDataset,
    classifier: Optional[Classifier] = None,
    state: Optional[PhaseState] = None,
) -> Classifier:
    """
    Supervised training on the labeled source with augmentation.

    Early stopping watches the validation cross-entropy; the weights of the
    best epoch are returned. max_epochs = 0 returns the initialized model.

    Raises:
        PreconditionError: The source carries no labels
        NumericError: A non-finite loss
    """
    if not source.is_labeled:
        raise PreconditionError("the source classifier needs a labeled domain")
    seed_everything(sub_seed(config.seed, "train_source_classifier"))
    if classifier is None:
        classifier = build_classifier(config, source.taxonomy.size, source.image_shape)
    if config.max_epochs == 0:
        logger.info("max_epochs is 0; returning the initialized classifier")
        return classifier

    device = _device()
    per_epoch = steps_per_epoch(config, source)
    optimizer, scheduler = classifier_optimizer(
        classifier, config.optimizer.classifier_lr, config.optimizer, per_epoch * config.max_epochs
    )
    stopper = EarlyStopping(config.patience)
    split = selection_split(source)
    step = 0
    for epoch in range(config.max_epochs):
        classifier.train()
        loader = batches(
            source, "train", config.batch_size, sub_seed(config.seed, "source_batches", epoch), drop_last=True
        )
        losses = []
        for index, (images, labels) in enumerate(loader):
            if index >= per_epoch:
                break
            images = augment_batch(images, config.augmentation, sub_seed(config.seed, "source_augment", step))
            logits, _ = classifier(images.to(device))
            loss = cross_entropy(softmax_probs(logits), labels.to(device), floor=config.log_floor)
            _check_finite("train_source_classifier", step, {"loss": float(loss)}, epoch=epoch)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            losses.append(float(loss))
            step += 1
        val = validation_loss(classifier, source, split, floor=config.log_floor)
        log_metrics(
            "train_source_classifier",
            step,
            {"train_loss": float(np.mean(losses)) if losses else float("nan"), "val_loss": val},
            epoch=epoch,
        )
        stopper.update(val, classifier, epoch)
        if stopper.should_stop:
            logger.info(f"Early stopping after epoch {epoch}; best epoch {stopper.best_epoch}")
            break
    stopper.restore(classifier)
    if state is not None:
        state.count("train_source_classifier", step)
        state.best["source_val_loss"] = stopper.best
    return classifier


@log_phase
def train_source_gan(
    config: TrainingConfig,
    source: DomainDataset,
    classifier: Classifier,
    state: Optional[PhaseState] = None,
    output_dir: Optional[PathLike] = None,
) -> Tuple[Generator, Discriminator]:
    """
    Feature-driven GAN on the source: G makes images, D judges their
    classifier features. The classifier is frozen throughout.

    The EMA generator is stored in `state` (a local state is used when none
    is given). With output_dir, checkpoints and a sample sheet are written.

    Raises:
        DivergenceError: A loss left the finite range or exceeded the threshold
    """
    if not source.is_labeled:
        raise PreconditionError("the source GAN needs a labeled domain")
    if state is None:
        state = PhaseState(
            t=0, classifier=classifier, label_prior=source.label_prior, class_names=source.taxonomy.names
        )
    seed_everything(sub_seed(config.seed, "train_source_gan"))
    device = _device()
    generator, disc = build_gan(config, classifier, num_domains=1)
    ema = ema_copy(generator)
    state.generator, state.ema_generator, state.discriminator = generator, ema, disc
    opt_g = adam(generator, config.optimizer.generator_lr, config.optimizer)
    opt_d = adam(disc, config.optimizer.discriminator_lr, config.optimizer)
    names = disc.tap_order
    prior = source.label_prior
    noise = torch_generator(sub_seed(config.seed, "source_gan_noise"))
    real_stream = cycle_batches(source, "train", config.batch_size, sub_seed(config.seed, "source_gan_batches"))
    n = config.batch_size
    zeros = torch.zeros(n, dtype=torch.long, device=device)

    was_training = classifier.training
    classifier.eval()
    set_trainable(classifier, False)
    try:
        for step in range(config.source_gan_steps):
            real_images, real_labels = next(real_stream)
            real_images, real_labels = real_images.to(device), real_labels.to(device)

            y, _ = sample_conditions(n, 1, prior, noise)
            z = torch.randn(n, generator.noise_dim, generator=noise)
            with torch.no_grad():
                _, fake_taps = classifier(generator(z.to(device), y.to(device), zeros))
                _, real_taps = classifier(real_images)
            loss_d, parts_d = source_discriminator_loss(
                disc, fake_taps, y.to(device), leaf_taps(real_taps, names), real_labels, config.lambda_r1
            )
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            set_trainable(disc, False)
            y, _ = sample_conditions(n, 1, prior, noise)
            z = torch.randn(n, generator.noise_dim, generator=noise)
            _, fake_taps = classifier(generator(z.to(device), y.to(device), zeros))
            loss_g = source_generator_loss(disc, select_taps(fake_taps, names), y.to(device))
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()
            set_trainable(disc, True)
            ema_update(ema, generator, config.ema_decay)

            values = {"loss_d": float(loss_d), "loss_g": float(loss_g), **parts_d}
            _guard_divergence("train_source_gan", step, values, config, state, output_dir)
            if (step + 1) % config.gan_eval_interval == 0 or step + 1 == config.source_gan_steps:
                log_metrics("train_source_gan", step + 1, values, domain=0)
    finally:
        set_trainable(classifier, True)
        classifier.train(was_training)

    state.count("train_source_gan", config.source_gan_steps)
    if output_dir is not None:
        save_state(state, config, output_dir)
        export_sample_sheet(
            ema, classifier.num_classes, [0], Path(output_dir) / "samples" / "source_gan.png",
            seed=sub_seed(config.seed, "sample_sheet"),
        )
    return generator, disc


# ============ ADAPTATION ============


@log_phase
def adapt_classifier(
    config: TrainingConfig,
    state: PhaseState,
    target: DomainDataset,
    output_dir: Optional[PathLike] = None,
) -> Classifier:
    """
    Align the classifier's target features with replayed features of the
    previous domains.

    D learns target -> 0, replay -> 1 (plus R1 on target features); the
    classifier learns to make target features look like replay while its
    logits on replay stay close to the snapshot M_p. Early stopping picks the
    epoch with the lowest InfoMax surrogate on the target validation split.

    Raises:
        PreconditionError: No generator to replay from, or target out of order
    """
    t = target.domain_index
    if state.t == t - 1:
        state.begin_domain(t)
    elif state.t != t:
        raise PreconditionError(f"the state is at domain {state.t}; cannot adapt to domain {t}")
    if t < 1:
        raise PreconditionError("domain 0 is the source; adaptation starts at domain 1")
    replay_gen = state.generator_snapshot
    if replay_gen is None:
        raise PreconditionError("classifier adaptation needs a generator to replay previous domains")
    replay_domains = 1 if config.disable_cg else None

    seed_everything(sub_seed(config.seed, "adapt_classifier", t))
    device = _device()
    classifier, teacher = state.classifier, state.classifier_snapshot
    disc = alignment_discriminator_for(config, state)
    names = disc.tap_order
    if config.max_epochs == 0:
        return classifier

    per_epoch = steps_per_epoch(config, target)
    opt_m, scheduler = classifier_optimizer(
        classifier, config.optimizer.adaptation_lr, config.optimizer, per_epoch * config.max_epochs
    )
    opt_d = adam(disc, config.optimizer.discriminator_lr, config.optimizer)
    stopper = EarlyStopping(config.patience)
    split = selection_split(target)
    noise = torch_generator(sub_seed(config.seed, "adapt_classifier_noise", t))
    stream = cycle_batches(target, "train", config.batch_size, sub_seed(config.seed, "adapt_batches", t))
    step = 0
    for epoch in range(config.max_epochs):
        classifier.train()
        disc.train()
        for _ in range(per_epoch):
            (images,) = next(stream)
            images = augment_batch(images, config.augmentation, sub_seed(config.seed, "adapt_augment", t, step))
            images = images.to(device)
            replay = sample_replay(
                replay_gen, classifier, t, config.batch_size, state.label_prior, noise, replay_domains
            )
            target_pseudo = pseudo_label_images(classifier, images)

            with torch.no_grad():
                _, target_taps = classifier(images)
                _, replay_taps = classifier(replay.images)
            loss_d, parts_d = alignment_discriminator_loss(
                disc, leaf_taps(target_taps, names), target_pseudo, replay_taps, replay.pseudo_labels,
                config.lambda_r1,
            )
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            set_trainable(disc, False)
            _, target_taps = classifier(images)
            student_logits, _ = classifier(replay.images)
            teacher_logits, _ = teacher(replay.images)
            loss_m, parts_m = alignment_classifier_loss(
                disc, select_taps(target_taps, names), target_pseudo, student_logits, teacher_logits,
                config.lambda_ld,
            )
            opt_m.zero_grad(set_to_none=True)
            loss_m.backward()
            opt_m.step()
            scheduler.step()
            set_trainable(disc, True)

            _check_finite("adapt_classifier", step, {"loss_d": float(loss_d), "loss_m": float(loss_m)}, domain=t)
            step += 1

        surrogate = surrogate_score(classifier, target, split)
        log_metrics(
            "adapt_classifier",
            step,
            {"loss_d": float(loss_d), "loss_m": float(loss_m), **parts_d, **parts_m, "surrogate": surrogate},
            domain=t,
            epoch=epoch,
        )
        if output_dir is not None:
            covered = 1 if config.disable_cg else t
            export_sample_sheet(
                replay_gen, state.num_classes, range(covered),
                Path(output_dir) / "replay" / f"domain_{t}_epoch_{epoch:03d}.png",
                seed=sub_seed(config.seed, "replay_sheet", t),
            )
        stopper.update(surrogate, classifier, epoch)
        if stopper.should_stop:
            logger.info(f"Early stopping after epoch {epoch}; best epoch {stopper.best_epoch}")
            break

    stopper.restore(classifier)
    state.count("adapt_classifier", step)
    state.best[f"surrogate_domain_{t}"] = stopper.best
    state.refresh_classifier_snapshot()
    return classifier


@log_phase
def adapt_gan(
    config: TrainingConfig,
    state: PhaseState,
    target: DomainDataset,
    output_dir: Optional[PathLike] = None,
) -> Tuple[Generator, Discriminator]:
    """
    Extend the GAN to domain t.

    G starts from the previous EMA generator with one new domain row and is
    trained adversarially over domains 0..t plus an image-distillation term
    to G_p over 0..t-1. D's real side mixes G_p samples of the previous
    domains with real images of the current one, in proportion t : 1.

    Raises:
        PreconditionError: The classifier has not been adapted to t yet
        DivergenceError: As in train_source_gan
    """
    t = target.domain_index
    if state.t != t or t < 1:
        raise PreconditionError(f"adapt the classifier to domain {t} before its GAN (state at {state.t})")
    previous = state.generator_snapshot
    if previous is None or state.ema_generator is None or state.discriminator is None:
        raise PreconditionError("GAN adaptation needs a trained generator and discriminator")
    if previous.num_domains < t:
        raise PreconditionError(f"the previous generator covers {previous.num_domains} domains, need {t}")

    seed_everything(sub_seed(config.seed, "adapt_gan", t))
    device = _device()
    classifier = state.classifier
    generator = copy.deepcopy(state.ema_generator)
    set_trainable(generator, True)
    generator.train()
    generator.grow_domains(t + 1 - generator.num_domains)
    disc = state.discriminator
    disc.grow_domains(t + 1 - disc.num_domains)
    ema = ema_copy(generator)
    state.generator, state.ema_generator = generator, ema
    opt_g = adam(generator, config.optimizer.generator_lr, config.optimizer)
    opt_d = adam(disc, config.optimizer.discriminator_lr, config.optimizer)
    names = disc.tap_order

    n = config.batch_size
    num_replayed = (n * t) // (t + 1)
    num_real = n - num_replayed
    noise = torch_generator(sub_seed(config.seed, "adapt_gan_noise", t))
    stream = cycle_batches(target, "train", num_real, sub_seed(config.seed, "adapt_gan_batches", t))
    current_domain = torch.full((num_real,), t, dtype=torch.long, device=device)

    was_training = classifier.training
    classifier.eval()
    set_trainable(classifier, False)
    try:
        for step in range(config.target_gan_steps):
            (images,) = next(stream)
            images = images.to(device)

            replay = sample_replay(previous, classifier, t, num_replayed, state.label_prior, noise) if num_replayed else None
            real_images = images if replay is None else torch.cat([replay.images, images])
            real_domains = current_domain if replay is None else torch.cat([replay.domain_indices, current_domain])
            real_pseudo = pseudo_label_images(classifier, real_images)
            y, tau = sample_conditions(n, t + 1, state.label_prior, noise)
            z = torch.randn(n, generator.noise_dim, generator=noise)
            y, tau = y.to(device), tau.to(device)
            with torch.no_grad():
                fake = generator(z.to(device), y, tau)
                _, fake_taps = classifier(fake)
                _, real_taps = classifier(real_images)
            fake_pseudo = pseudo_label_images(classifier, fake)
            loss_d, parts_d = gan_adaptation_discriminator_loss(
                disc, fake_taps, fake_pseudo, tau, leaf_taps(real_taps, names), real_pseudo, real_domains,
                num_replayed, config.lambda_r1,
            )
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            set_trainable(disc, False)
            y, tau = sample_conditions(n, t + 1, state.label_prior, noise)
            z = torch.randn(n, generator.noise_dim, generator=noise)
            y, tau = y.to(device), tau.to(device)
            fake = generator(z.to(device), y, tau)
            fake_pseudo = pseudo_label_images(classifier, fake.detach())
            _, fake_taps = classifier(fake)
            y_prev, tau_prev = sample_conditions(n, t, state.label_prior, noise)
            z_prev = torch.randn(n, generator.noise_dim, generator=noise).to(device)
            y_prev, tau_prev = y_prev.to(device), tau_prev.to(device)
            distill_current = generator(z_prev, y_prev, tau_prev)
            distill_previous = previous(z_prev, y_prev, tau_prev)
            loss_g, parts_g = gan_adaptation_generator_loss(
                disc, select_taps(fake_taps, names), fake_pseudo, tau, distill_current, distill_previous,
                config.lambda_id,
            )
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()
            set_trainable(disc, True)
            ema_update(ema, generator, config.ema_decay)

            values = {"loss_d": float(loss_d), "loss_g": float(loss_g), **parts_d, **parts_g}
            _guard_divergence("adapt_gan", step, values, config, state, output_dir)
            if (step + 1) % config.gan_eval_interval == 0 or step + 1 == config.target_gan_steps:
                log_metrics("adapt_gan", step + 1, values, domain=t)
    finally:
        set_trainable(classifier, True)
        classifier.train(was_training)
        # the real target images are not needed after this phase
        del stream

    state.count("adapt_gan", config.target_gan_steps)
    state.refresh_generator_snapshot()
    if output_dir is not None:
        save_state(state, config, output_dir)
        export_sample_sheet(
            ema, state.num_classes, range(t + 1), Path(output_dir) / "samples" / f"gan_domain_{t}.png",
            seed=sub_seed(config.seed, "sample_sheet"),
        )
    return generator, disc
