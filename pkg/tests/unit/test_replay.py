"""
Unit tests for generative replay: condition sampling, pseudo-labeled replay
batches and image distillation against a frozen generator.
"""

import numpy as np
import pytest
import torch

from mfa_replay.errors import PreconditionError, ValidationError
from mfa_replay.models.snapshot import snapshot
from mfa_replay.training.replay import image_distillation, sample_conditions, sample_replay

PRIOR = (0.2, 0.3, 0.5)


@pytest.mark.unit
class TestSampleConditions:
    def test_frequencies_follow_prior_and_uniform_domains(self):
        n = 3000
        y, tau = sample_conditions(n, 3, PRIOR, torch.Generator().manual_seed(11))
        for counts, expected in (
            (np.bincount(y.numpy(), minlength=3), np.asarray(PRIOR)),
            (np.bincount(tau.numpy(), minlength=3), np.full(3, 1 / 3)),
        ):
            sigma = np.sqrt(n * expected * (1 - expected))
            assert np.all(np.abs(counts - n * expected) <= 3 * sigma)

    def test_low_domain_bounds_tau(self):
        _, tau = sample_conditions(200, 4, PRIOR, torch.Generator().manual_seed(0), low_domain=2)
        assert set(tau.tolist()) <= {2, 3}

    def test_zero_prior_class_never_drawn(self):
        y, _ = sample_conditions(500, 1, (0.5, 0.0, 0.5), torch.Generator().manual_seed(0))
        assert 1 not in set(y.tolist())

    def test_empty_domain_range_rejected(self):
        with pytest.raises(ValidationError):
            sample_conditions(4, 1, PRIOR, torch.Generator(), low_domain=1)

    def test_massless_prior_rejected(self):
        with pytest.raises(ValidationError):
            sample_conditions(4, 2, (0.0, 0.0, 0.0), torch.Generator())


@pytest.mark.unit
class TestSampleReplay:
    """Synthetic batches of previous domains."""

    def test_nothing_to_replay_at_source(self, generator, classifier):
        with pytest.raises(PreconditionError):
            sample_replay(generator, classifier, 0, 4, PRIOR, seed=0)

    def test_first_target_replays_source_only(self, generator, classifier, image_shape):
        batch = sample_replay(generator, classifier, 1, 12, PRIOR, seed=5)
        assert len(batch) == 12
        assert batch.images.shape == (12, *image_shape)
        assert batch.domain_indices.tolist() == [0] * 12
        assert batch.pseudo_labels.shape == (12,)
        assert batch.pseudo_labels.max() < 3

    def test_later_domain_replays_every_previous_domain(self, generator, classifier):
        generator.grow_domains()
        batch = sample_replay(generator, classifier, 3, 90, PRIOR, seed=2)
        assert set(batch.domain_indices.tolist()) == {0, 1, 2}

    def test_source_only_replay(self, generator, classifier):
        generator.grow_domains()
        batch = sample_replay(generator, classifier, 3, 30, PRIOR, seed=2, replay_domains=1)
        assert batch.domain_indices.tolist() == [0] * 30

    def test_generator_must_cover_previous_domains(self, generator, classifier):
        with pytest.raises(PreconditionError):
            sample_replay(generator, classifier, 3, 4, PRIOR, seed=0)

    def test_same_seed_same_batch(self, generator, classifier):
        first = sample_replay(generator, classifier, 2, 8, PRIOR, seed=9)
        second = sample_replay(generator, classifier, 2, 8, PRIOR, seed=9)
        assert torch.equal(first.images, second.images)
        assert torch.equal(first.pseudo_labels, second.pseudo_labels)
        assert torch.equal(first.conditioning_labels, second.conditioning_labels)

    def test_modes_are_restored(self, generator, classifier):
        generator.train()
        classifier.train()
        sample_replay(generator, classifier, 1, 4, PRIOR, seed=0)
        assert generator.training and classifier.training


@pytest.mark.unit
class TestImageDistillation:
    def _conditions(self, generator, n=4):
        z = generator.sample_noise(n, torch.Generator().manual_seed(0))
        return z, torch.tensor([0, 1, 2, 0]), torch.zeros(n, dtype=torch.long)

    def test_zero_for_an_identical_copy(self, generator):
        generator.eval()
        frozen = snapshot(generator)
        z, y, tau = self._conditions(generator)
        assert image_distillation(generator, frozen, z, y, tau, t=1).item() == pytest.approx(0.0, abs=1e-7)

    def test_positive_after_update_and_differentiable(self, generator):
        generator.eval()
        frozen = snapshot(generator)
        with torch.no_grad():
            generator.constant.add_(0.5)
        z, y, tau = self._conditions(generator)
        loss = image_distillation(generator, frozen, z, y, tau, t=1)
        assert loss.item() > 0
        loss.backward()
        assert generator.constant.grad is not None

    def test_current_domain_rejected(self, generator):
        frozen = snapshot(generator)
        z, y, _ = self._conditions(generator)
        tau = torch.tensor([0, 1, 0, 0])
        with pytest.raises(ValidationError):
            image_distillation(generator, frozen, z, y, tau, t=1)
