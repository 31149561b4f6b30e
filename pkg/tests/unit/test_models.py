"""
Unit tests for the classifier, the conditional generator, the projection
discriminator and frozen snapshots.
"""

import pytest
import torch

from mfa_replay.config import ModelConfig
from mfa_replay.errors import ValidationError
from mfa_replay.models.classifier import (
    Classifier,
    TapSpec,
    load_pretrained_backbone,
    logit_distillation,
    pooled_features,
    pseudo_label,
)
from mfa_replay.models.discriminator import Discriminator, minibatch_stddev, plan_trunk
from mfa_replay.models.generator import Generator, upsample_positions
from mfa_replay.models.snapshot import Snapshot, snapshot


@pytest.mark.unit
class TestClassifier:
    """Residual classifier with four taps."""

    def test_tap_shapes_halve_per_stage(self, classifier):
        shapes = [spec.shape for spec in classifier.tap_spec]
        assert shapes == [(4, 16, 16), (4, 8, 8), (8, 4, 4), (8, 2, 2)]

    def test_forward_matches_declared_taps(self, classifier, image_shape):
        classifier.eval()
        logits, taps = classifier(torch.rand(5, *image_shape))
        assert logits.shape == (5, 3)
        for spec in classifier.tap_spec:
            assert tuple(taps[spec.name].shape) == (5, *spec.shape)

    def test_duplicate_rows_give_identical_outputs_in_eval(self, classifier, image_shape):
        classifier.eval()
        image = torch.rand(1, *image_shape)
        logits, _ = classifier(image.repeat(4, 1, 1, 1))
        assert torch.allclose(logits, logits[:1].expand_as(logits), atol=1e-6)

    def test_eval_is_deterministic(self, classifier, image_shape):
        classifier.eval()
        images = torch.rand(3, *image_shape)
        with torch.no_grad():
            first, _ = classifier(images)
            second, _ = classifier(images)
        assert torch.equal(first, second)

    def test_wrong_image_shape_rejected(self, classifier):
        with pytest.raises(ValidationError):
            classifier(torch.rand(2, 3, 12, 12))

    def test_channel_mismatch_rejected(self, tiny_arch):
        with pytest.raises(ValidationError):
            Classifier(3, (1, 16, 16), tiny_arch)

    def test_single_class_rejected(self, tiny_arch, image_shape):
        with pytest.raises(ValidationError):
            Classifier(1, image_shape, tiny_arch)

    def test_unknown_tap_rejected(self, classifier):
        assert classifier.tap("stage3").channels == 8
        with pytest.raises(ValidationError):
            classifier.tap("stage9")

    def test_pooled_features_width(self, classifier, image_shape):
        classifier.eval()
        assert pooled_features(classifier, torch.rand(2, *image_shape)).shape == (2, 8)


@pytest.mark.unit
class TestClassifierHelpers:
    def test_pseudo_label_ties_go_to_lowest_index(self):
        probs = torch.tensor([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]])
        assert pseudo_label(probs).tolist() == [0, 1]

    def test_logit_distillation_is_mean_absolute_difference(self):
        a = torch.tensor([[1.0, 2.0], [0.0, -1.0]])
        b = torch.tensor([[0.0, 2.0], [1.0, 1.0]])
        assert logit_distillation(a, b).item() == pytest.approx(1.0)

    def test_logit_distillation_shape_mismatch(self):
        with pytest.raises(ValidationError):
            logit_distillation(torch.zeros(2, 3), torch.zeros(2, 4))

    def test_pretrained_backbone_loads_matching_tensors(self, classifier, tiny_arch, image_shape, tmp_path):
        state = dict(classifier.state_dict())
        state["fc.weight"] = torch.zeros(1000, 8)
        path = tmp_path / "backbone.pth"
        torch.save(state, path)

        torch.manual_seed(5)
        fresh = Classifier(3, image_shape, tiny_arch)
        loaded = load_pretrained_backbone(fresh, path)
        assert "fc.weight" not in loaded
        assert len(loaded) == len(classifier.state_dict())
        for key, value in classifier.state_dict().items():
            assert torch.equal(fresh.state_dict()[key], value)

    def test_pretrained_backbone_shape_mismatch(self, classifier, tiny_arch, image_shape, tmp_path):
        state = dict(classifier.state_dict())
        key = next(k for k, v in state.items() if v.dim() == 4)
        state[key] = torch.zeros(1, 1, 1, 1)
        path = tmp_path / "backbone.pth"
        torch.save({"state_dict": state}, path)
        with pytest.raises(ValidationError):
            load_pretrained_backbone(Classifier(3, image_shape, tiny_arch), path)


@pytest.mark.unit
class TestGenerator:
    """Style-modulated conditional generator."""

    def test_output_shape_and_range(self, generator, image_shape):
        z = generator.sample_noise(6, torch.Generator().manual_seed(0))
        y = torch.tensor([0, 1, 2, 0, 1, 2])
        t = torch.tensor([0, 0, 0, 1, 1, 1])
        images = generator(z, y, t)
        assert images.shape == (6, *image_shape)
        assert images.abs().max() <= 1.0

    def test_conditioning_changes_output(self, generator):
        generator.eval()
        z = generator.sample_noise(1, torch.Generator().manual_seed(3))
        with torch.no_grad():
            a = generator(z, torch.tensor([0]), torch.tensor([0]))
            b = generator(z, torch.tensor([2]), torch.tensor([0]))
            c = generator(z, torch.tensor([0]), torch.tensor([1]))
        assert not torch.allclose(a, b)
        assert not torch.allclose(a, c)

    def test_grow_domains_keeps_existing_rows(self, generator):
        before = generator.domain_embedding.weight.detach().clone()
        generator.grow_domains()
        assert generator.num_domains == 3
        assert torch.equal(generator.domain_embedding.weight[:2].detach(), before)
        z = generator.sample_noise(1)
        assert generator(z, torch.tensor([1]), torch.tensor([2])).shape[0] == 1

    def test_unknown_domain_rejected(self, generator):
        z = generator.sample_noise(1)
        with pytest.raises(ValidationError):
            generator(z, torch.tensor([0]), torch.tensor([2]))

    def test_out_of_range_class_rejected(self, generator):
        z = generator.sample_noise(1)
        with pytest.raises(ValidationError):
            generator(z, torch.tensor([3]), torch.tensor([0]))

    @pytest.mark.parametrize("side", [12, 20, 2])
    def test_image_side_must_be_power_of_two_multiple_of_four(self, tiny_arch, side):
        with pytest.raises(ValidationError):
            Generator(3, 1, (3, side, side), tiny_arch)

    def test_upsample_positions_cover_every_doubling(self):
        positions = upsample_positions(8, 3)
        assert len(positions) == 3
        assert positions == sorted(set(positions))
        assert all(0 <= p < 8 for p in positions)


@pytest.mark.unit
class TestMinibatchStddev:
    def test_identical_rows_give_zero_channel(self):
        x = torch.rand(1, 2, 3, 3).repeat(4, 1, 1, 1)
        out = minibatch_stddev(x)
        assert out.shape == (4, 3, 3, 3)
        assert torch.all(out[:, 2] == 0)

    def test_unit_offset_pair_gives_half(self):
        base = torch.rand(1, 2, 3, 3)
        out = minibatch_stddev(torch.cat([base, base + 1.0]))
        assert torch.allclose(out[:, 2], torch.full((2, 3, 3), 0.5))

    def test_batch_of_one_gives_zero_channel(self):
        out = minibatch_stddev(torch.rand(1, 2, 4, 4))
        assert torch.all(out[:, 2] == 0)

    def test_gradient_is_finite_at_zero_spread(self):
        x = torch.ones(3, 2, 2, 2, requires_grad=True)
        minibatch_stddev(x).sum().backward()
        assert torch.isfinite(x.grad).all()


@pytest.mark.unit
class TestDiscriminator:
    """Multi-scale projection discriminator over classifier taps."""

    def _taps(self, classifier, image_shape, n=4):
        classifier.eval()
        with torch.no_grad():
            _, taps = classifier(torch.rand(n, *image_shape))
        return taps

    def test_one_logit_per_sample(self, discriminator, classifier, image_shape):
        taps = self._taps(classifier, image_shape)
        y = torch.tensor([0, 1, 2, 0])
        assert discriminator(taps, y).shape == (4,)
        assert discriminator(taps, y, torch.tensor([0, 1, 0, 1])).shape == (4,)

    def test_trunk_plan_fuses_every_deeper_tap(self, classifier, tiny_arch):
        plan = plan_trunk(classifier.tap_spec, tiny_arch.discriminator_layers)
        assert [layer.fuse_tap for layer in plan] == ["stage2", "stage3", "stage4", None]
        assert [layer.stride for layer in plan] == [2, 2, 2, 1]

    def test_too_few_layers_rejected(self, classifier):
        with pytest.raises(ValidationError):
            plan_trunk(classifier.tap_spec, 3)

    def test_unreachable_resolution_rejected(self):
        taps = [TapSpec("stage1", 4, 16, 16), TapSpec("stage2", 4, 6, 6)]
        with pytest.raises(ValidationError):
            plan_trunk(taps, 4)

    def test_single_tap_discriminator(self, classifier, tiny_arch, image_shape):
        disc = Discriminator([classifier.tap("stage4")], 3, 1, tiny_arch)
        taps = self._taps(classifier, image_shape)
        assert disc.tap_order == ["stage4"]
        assert disc({"stage4": taps["stage4"]}, torch.tensor([0, 1, 2, 0])).shape == (4,)

    def test_missing_tap_rejected(self, discriminator, classifier, image_shape):
        taps = self._taps(classifier, image_shape)
        del taps["stage3"]
        with pytest.raises(ValidationError):
            discriminator(taps, torch.zeros(4, dtype=torch.long))

    def test_projection_difference_is_embedding_inner_product(self, discriminator):
        phi = torch.randn(2, discriminator.class_embedding.embedding_dim)
        y0 = torch.zeros(2, dtype=torch.long)
        y1 = torch.ones(2, dtype=torch.long)
        difference = discriminator.project(phi, y1) - discriminator.project(phi, y0)
        embedding = discriminator.class_embedding.weight
        expected = phi @ (embedding[1] - embedding[0])
        assert torch.allclose(difference, expected, atol=1e-5)

    def test_domain_term_is_additive(self, discriminator):
        phi = torch.randn(3, discriminator.domain_embedding.embedding_dim)
        y = torch.tensor([0, 1, 2])
        t = torch.tensor([1, 1, 0])
        with_domain = discriminator.project(phi, y, t)
        without = discriminator.project(phi, y)
        expected = (discriminator.domain_embedding(t) * phi).sum(dim=1)
        assert torch.allclose(with_domain - without, expected, atol=1e-5)

    def test_grow_domains(self, discriminator):
        before = discriminator.domain_embedding.weight.detach().clone()
        discriminator.grow_domains(2)
        assert discriminator.num_domains == 4
        assert torch.equal(discriminator.domain_embedding.weight[:2].detach(), before)

    def test_unknown_domain_rejected(self, discriminator):
        phi = torch.randn(1, discriminator.domain_embedding.embedding_dim)
        with pytest.raises(ValidationError):
            discriminator.project(phi, torch.tensor([0]), torch.tensor([5]))


@pytest.mark.unit
class TestSnapshot:
    def test_snapshot_is_frozen_and_independent(self, classifier, image_shape):
        frozen = snapshot(classifier)
        assert all(not p.requires_grad for p in frozen.parameters())
        frozen.train()
        assert not frozen.training

        images = torch.rand(2, *image_shape)
        classifier.eval()
        before, _ = frozen(images)
        with torch.no_grad():
            for param in classifier.parameters():
                param.add_(1.0)
        after, _ = frozen(images)
        assert torch.equal(before, after)

    def test_attribute_fallthrough(self, classifier):
        frozen = snapshot(classifier)
        assert frozen.num_classes == 3
        assert frozen.tap_spec == classifier.tap_spec

    def test_snapshot_of_snapshot_unwraps(self, generator):
        frozen = snapshot(snapshot(generator))
        assert not isinstance(frozen.module, Snapshot)
        assert frozen.num_domains == generator.num_domains


@pytest.mark.unit
def test_full_preset_taps_at_128px():
    arch = ModelConfig(
        widths=(4, 4, 4, 4),
        stem_kernel=7,
        stem_stride=2,
        stem_pool=True,
        head_hidden=4,
    )
    model = Classifier(2, (3, 128, 128), arch)
    assert [spec.height for spec in model.tap_spec] == [32, 16, 8, 4]
