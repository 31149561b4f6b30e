"""
Unit tests for sliding-window segmentation.
"""

import json

import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

from mfa_replay.config import SegmentationConfig
from mfa_replay.errors import ValidationError
from mfa_replay.segmentation import (
    grid_size,
    mode_filter,
    segment,
    temperature_scale,
    window_logits,
    write_segmentation,
)


class ChannelMeanClassifier(nn.Module):
    """Logits are a linear map of the per-channel window means."""

    def __init__(self, window, num_classes=3):
        super().__init__()
        self.image_shape = (3, window, window)
        self.linear = nn.Linear(3, num_classes)
        with torch.no_grad():
            self.linear.weight.copy_(torch.eye(num_classes, 3) * 4.0)
            self.linear.bias.zero_()

    def forward(self, x):
        return self.linear(x.mean(dim=(2, 3))), {}


def _config(**kwargs):
    fields = {"window": 8, "stride": 4, "temperature": 1.0, "gaussian_sigma": 0.0, "mode_filter_radius": 0}
    fields.update(kwargs)
    return SegmentationConfig(**fields)


@pytest.mark.unit
class TestGrid:
    def test_grid_of_a_large_image(self):
        assert grid_size(5000, 5000, 128, 32) == (153, 153)

    def test_window_equal_to_image(self):
        assert grid_size(32, 32, 32, 8) == (1, 1)

    def test_image_smaller_than_window(self):
        with pytest.raises(ValidationError):
            grid_size(20, 40, 32, 8)

    def test_default_stride_is_quarter_window(self):
        assert SegmentationConfig(window=128).effective_stride == 32

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValidationError):
            temperature_scale(torch.zeros(2, 3), 0.0)

    def test_temperature_divides_logits(self):
        logits = torch.tensor([[2.0, -4.0]])
        assert temperature_scale(logits, 2.0).tolist() == [[1.0, -2.0]]


@pytest.mark.unit
class TestModeFilter:
    def test_isolated_cell_is_removed(self):
        grid = np.zeros((5, 5), dtype=np.int64)
        grid[2, 2] = 1
        assert mode_filter(grid, 1, 2).tolist() == np.zeros((5, 5)).tolist()

    def test_tie_keeps_own_label(self):
        assert mode_filter(np.array([[0, 1]]), 1, 2).tolist() == [[0, 1]]

    def test_tie_without_own_label_goes_to_lowest_class(self):
        grid = np.array([[0, 1, 0], [1, 2, 1], [0, 1, 0]])
        assert mode_filter(grid, 1, 3)[1, 1] == 0

    def test_radius_zero_is_identity(self):
        grid = np.array([[0, 2], [1, 1]])
        assert np.array_equal(mode_filter(grid, 0, 3), grid)


@pytest.mark.unit
class TestSegment:
    """Sliding-window segmentation end to end."""

    def test_constant_image_gives_one_class(self):
        image = torch.zeros(3, 24, 24)
        image[1] = 0.5
        class_map, prob_maps = segment(ChannelMeanClassifier(8), image, _config(gaussian_sigma=1.0, mode_filter_radius=1))
        assert class_map.shape == (5, 5)
        assert np.all(class_map == 1)
        assert np.allclose(prob_maps, prob_maps[:, :1, :1])

    def test_probabilities_renormalized_after_smoothing(self):
        torch.manual_seed(0)
        image = torch.rand(3, 32, 32) * 2 - 1
        _, prob_maps = segment(ChannelMeanClassifier(8), image, _config(gaussian_sigma=1.5))
        assert prob_maps.shape == (3, 7, 7)
        assert np.allclose(prob_maps.sum(axis=0), 1.0)
        assert prob_maps.min() >= 0.0

    def test_left_right_halves(self):
        image = torch.full((3, 16, 32), -1.0)
        image[0, :, :16] = 1.0
        image[2, :, 16:] = 1.0
        class_map, _ = segment(ChannelMeanClassifier(8), image, _config(window=8, stride=8))
        assert class_map.tolist() == [[0, 0, 2, 2], [0, 0, 2, 2]]

    def test_higher_temperature_flattens(self):
        image = torch.zeros(3, 8, 8)
        image[0] = 1.0
        _, sharp = segment(ChannelMeanClassifier(8), image, _config(temperature=1.0))
        _, flat = segment(ChannelMeanClassifier(8), image, _config(temperature=4.0))
        assert flat[0, 0, 0] < sharp[0, 0, 0]
        assert flat[0, 0, 0] > 1 / 3

    def test_window_must_match_classifier_input(self):
        with pytest.raises(ValidationError):
            segment(ChannelMeanClassifier(16), torch.zeros(3, 32, 32), _config(window=8))

    def test_batching_does_not_change_logits(self):
        torch.manual_seed(1)
        image = torch.rand(3, 20, 20)
        model = ChannelMeanClassifier(8)
        small = window_logits(model, image, _config(batch_size=2))
        large = window_logits(model, image, _config(batch_size=100))
        assert small.shape == (4, 4, 3)
        assert torch.allclose(small, large)

    def test_real_classifier(self, classifier):
        class_map, prob_maps = segment(classifier, torch.zeros(3, 32, 32), _config(window=16, stride=8))
        assert class_map.shape == (3, 3)
        assert prob_maps.shape == (3, 3, 3)


@pytest.mark.unit
def test_write_segmentation(tmp_path):
    class_map = np.array([[0, 1], [2, 1]])
    prob_maps = np.stack([class_map == c for c in range(3)]).astype(np.float64)
    paths = write_segmentation(class_map, prob_maps, ["tumor", "stroma", "fat"], tmp_path, stem="slide")

    indexed = Image.open(paths["class_map"])
    assert indexed.mode == "P"
    assert np.asarray(indexed).tolist() == [[0, 1], [2, 1]]
    legend = json.loads(paths["legend"].read_text())
    assert legend["2"]["class"] == "fat"
    assert np.asarray(Image.open(paths["stroma"])).tolist() == [[0, 255], [0, 255]]
    assert paths["tumor"].name == "slide_prob_tumor.png"
