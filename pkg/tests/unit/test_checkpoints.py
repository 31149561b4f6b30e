"""
Unit tests for checkpoint bundles and the saved training state.
"""

import numpy as np
import pytest
import torch

from mfa_replay.errors import (
    CheckpointError,
    CheckpointHashError,
    CheckpointVersionError,
    CorruptCheckpointError,
    PreconditionError,
    ValidationError,
)
from mfa_replay.models.classifier import Classifier
from mfa_replay.persistence.checkpoints import (
    CheckpointBundle,
    coverage_tag,
    load_checkpoint,
    load_module,
    module_tensors,
    parse_coverage,
    save_checkpoint,
)
from mfa_replay.training.ema import ema_copy
from mfa_replay.training.state import (
    CLASSIFIER_CHECKPOINT,
    GAN_CHECKPOINT,
    PhaseState,
    build_classifier,
    build_gan,
    load_state,
    save_state,
)


def _bundle(classifier, **overrides):
    fields = {
        "kind": "classifier",
        "tensors": module_tensors("classifier", classifier),
        "architecture": {"num_classes": 3},
        "coverage": coverage_tag(0),
        "step": 7,
        "config_hash": "abc123",
        "metadata": {"label_prior": [0.5, 0.25, 0.25]},
    }
    fields.update(overrides)
    return CheckpointBundle(**fields)


@pytest.fixture
def state(tiny_config, image_shape):
    torch.manual_seed(0)
    classifier = build_classifier(tiny_config, 3, image_shape)
    generator, discriminator = build_gan(tiny_config, classifier)
    return PhaseState(
        t=0,
        classifier=classifier,
        label_prior=np.array([0.5, 0.25, 0.25]),
        class_names=("class_0", "class_1", "class_2"),
        generator=generator,
        ema_generator=ema_copy(generator),
        discriminator=discriminator,
        steps={"train_source_gan": 3},
    )


@pytest.mark.unit
class TestCoverageTags:
    def test_round_trip(self):
        assert coverage_tag(3) == "0:3"
        assert parse_coverage("0:3") == 3

    @pytest.mark.parametrize("tag", ["1:3", "0:-1", "0-3", "a:b"])
    def test_invalid_tags(self, tag):
        with pytest.raises(ValidationError):
            parse_coverage(tag)


@pytest.mark.unit
class TestCheckpointFiles:
    """Binary bundle format."""

    def test_reloaded_classifier_gives_identical_logits(self, classifier, image_shape, tmp_path):
        path = save_checkpoint(_bundle(classifier), tmp_path / "c.ckpt")
        bundle = load_checkpoint(path, expected_config_hash="abc123", expected_kind="classifier")
        assert bundle.step == 7
        assert bundle.metadata["label_prior"] == [0.5, 0.25, 0.25]

        torch.manual_seed(99)
        fresh = Classifier(3, image_shape, classifier.arch)
        load_module(fresh, bundle, "classifier")
        images = torch.rand(4, *image_shape)
        classifier.eval()
        fresh.eval()
        with torch.no_grad():
            assert torch.equal(classifier(images)[0], fresh(images)[0])

    def test_no_temporary_file_left_behind(self, classifier, tmp_path):
        save_checkpoint(_bundle(classifier), tmp_path / "c.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["c.ckpt"]

    def test_truncated_file(self, classifier, tmp_path):
        path = save_checkpoint(_bundle(classifier), tmp_path / "c.ckpt")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 10])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_truncated_header(self, classifier, tmp_path):
        path = save_checkpoint(_bundle(classifier), tmp_path / "c.ckpt")
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_flipped_payload_byte(self, classifier, tmp_path):
        path = save_checkpoint(_bundle(classifier), tmp_path / "c.ckpt")
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_other_format_version(self, classifier, tmp_path):
        path = save_checkpoint(_bundle(classifier, format_version=99), tmp_path / "c.ckpt")
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_config_hash_mismatch(self, classifier, tmp_path):
        path = save_checkpoint(_bundle(classifier), tmp_path / "c.ckpt")
        with pytest.raises(CheckpointHashError):
            load_checkpoint(path, expected_config_hash="ffff")

    def test_kind_mismatch(self, classifier, tmp_path):
        path = save_checkpoint(_bundle(classifier), tmp_path / "c.ckpt")
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_kind="gan")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_unknown_kind_rejected(self, classifier):
        with pytest.raises(ValidationError):
            _bundle(classifier, kind="optimizer")

    def test_mismatched_architecture(self, classifier, tiny_arch, image_shape):
        other = Classifier(4, image_shape, tiny_arch)
        with pytest.raises(CheckpointError):
            load_module(other, _bundle(classifier), "classifier")

    def test_dtypes_survive(self, tmp_path):
        tensors = {
            "a.half": torch.arange(4, dtype=torch.float16),
            "a.long": torch.arange(3, dtype=torch.int64),
            "a.flag": torch.tensor([True, False]),
            "a.count": torch.tensor(5),
        }
        bundle = CheckpointBundle(kind="gan", tensors=tensors, architecture={}, coverage="0:1")
        loaded = load_checkpoint(save_checkpoint(bundle, tmp_path / "g.ckpt"))
        for name, tensor in tensors.items():
            assert loaded.tensors[name].dtype == tensor.dtype
            assert torch.equal(loaded.tensors[name], tensor)
        assert loaded.last_domain == 1


@pytest.mark.unit
class TestTrainingState:
    """save_state / load_state of a whole run directory."""

    def test_round_trip(self, state, tiny_config, image_shape, tmp_path):
        paths = save_state(state, tiny_config, tmp_path)
        assert paths["classifier"].name == CLASSIFIER_CHECKPOINT
        assert paths["gan"].name == GAN_CHECKPOINT

        restored = load_state(tiny_config, tmp_path)
        assert restored.t == 0
        assert restored.class_names == state.class_names
        assert restored.label_prior.tolist() == [0.5, 0.25, 0.25]
        assert restored.steps == {"train_source_gan": 3}
        assert restored.covered_domains == 1

        images = torch.rand(3, *image_shape)
        state.classifier.eval()
        restored.classifier.eval()
        with torch.no_grad():
            assert torch.equal(state.classifier(images)[0], restored.classifier(images)[0])
            z = torch.randn(3, restored.generator.noise_dim)
            y = torch.tensor([0, 1, 2])
            t = torch.zeros(3, dtype=torch.long)
            state.ema_generator.eval()
            restored.ema_generator.eval()
            assert torch.equal(state.ema_generator(z, y, t), restored.ema_generator(z, y, t))

    def test_classifier_only_state(self, state, tiny_config, tmp_path):
        state.generator = state.ema_generator = state.discriminator = None
        paths = save_state(state, tiny_config, tmp_path)
        assert "gan" not in paths
        assert load_state(tiny_config, tmp_path).generator is None

    def test_other_configuration_refused(self, state, tiny_config, tmp_path):
        save_state(state, tiny_config, tmp_path)
        changed = tiny_config.model_copy(update={"lambda_ld": tiny_config.lambda_ld + 1.0})
        with pytest.raises(CheckpointHashError):
            load_state(changed, tmp_path)
        assert load_state(changed, tmp_path, check_hash=False).t == 0

    def test_snapshots_exist_after_the_source(self, state, tiny_config, tmp_path):
        state.begin_domain(1)
        state.generator.grow_domains()
        state.ema_generator.grow_domains()
        state.discriminator.grow_domains()
        save_state(state, tiny_config, tmp_path)
        restored = load_state(tiny_config, tmp_path)
        assert restored.t == 1
        assert restored.covered_domains == 2
        assert restored.classifier_snapshot is not None
        assert restored.generator_snapshot is not None

    def test_begin_domain_must_be_next(self, state):
        with pytest.raises(PreconditionError):
            state.begin_domain(2)

    def test_completed_phases_survive_a_reload(self, state, tiny_config, tmp_path):
        state.mark_completed("train_source_classifier")
        state.mark_completed("train_source_gan")
        state.begin_domain(1)
        state.mark_completed("adapt_classifier")
        state.mark_completed("adapt_classifier")
        save_state(state, tiny_config, tmp_path)

        restored = load_state(tiny_config, tmp_path)
        assert restored.completed == {0: ["train_source_classifier", "train_source_gan"], 1: ["adapt_classifier"]}
        assert restored.has_completed("adapt_classifier")
        assert not restored.has_completed("adapt_gan")
        assert restored.has_completed("train_source_gan", 0)
