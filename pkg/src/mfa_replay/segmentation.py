"""
Patch-based segmentation of large images with a trained classifier.

Every window position is classified as its center pixel; the per-class
probability grids are then smoothed:

    logits / T -> softmax -> Gaussian filter per class -> renormalize
    -> argmax -> mode filter

Only windows fully inside the image are used, so for an H x W image the
output grid is (floor((H - w) / s) + 1) x (floor((W - w) / s) + 1).
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from scipy.ndimage import convolve, gaussian_filter

from mfa_replay.config import SegmentationConfig
from mfa_replay.errors import ValidationError

logger = logging.getLogger(__name__)


def temperature_scale(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """
    Raises:
        ValidationError: temperature <= 0
    """
    if not temperature > 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    return logits / temperature


def grid_size(height: int, width: int, window: int, stride: int) -> Tuple[int, int]:
    """Number of window positions along each axis."""
    if height < window or width < window:
        raise ValidationError(f"image {height}x{width} is smaller than the {window}px window")
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    return (height - window) // stride + 1, (width - window) // stride + 1


def mode_filter(class_map: np.ndarray, radius: int, num_classes: int) -> np.ndarray:
    """
    Replace each cell by the most frequent label in its (2r+1)^2 neighbourhood.

    Cells outside the grid do not vote. On a tie the cell keeps its own label
    when it is among the most frequent, otherwise the lowest class index wins.
    """
    class_map = np.asarray(class_map, dtype=np.int64)
    if radius <= 0:
        return class_map.copy()
    kernel = np.ones((2 * radius + 1, 2 * radius + 1), dtype=np.int64)
    counts = np.stack(
        [convolve((class_map == c).astype(np.int64), kernel, mode="constant", cval=0) for c in range(num_classes)]
    )
    best = counts.max(axis=0)
    own = np.take_along_axis(counts, class_map[None], axis=0)[0]
    return np.where(own == best, class_map, counts.argmax(axis=0))


def _window_origins(height: int, width: int, window: int, stride: int) -> List[Tuple[int, int]]:
    rows, cols = grid_size(height, width, window, stride)
    return [(i * stride, j * stride) for i in range(rows) for j in range(cols)]


@torch.no_grad()
def window_logits(classifier: nn.Module, image: torch.Tensor, config: SegmentationConfig) -> torch.Tensor:
    """Classifier logits of every window, shape rows x cols x L."""
    _, height, width = image.shape
    window, stride = config.window, config.effective_stride
    rows, cols = grid_size(height, width, window, stride)
    origins = _window_origins(height, width, window, stride)
    device = next(classifier.parameters()).device
    was_training = classifier.training
    classifier.eval()
    chunks = []
    try:
        for start in range(0, len(origins), config.batch_size):
            batch = torch.stack(
                [image[:, i : i + window, j : j + window] for i, j in origins[start : start + config.batch_size]]
            )
            logits, _ = classifier(batch.to(device))
            chunks.append(logits.cpu())
    finally:
        classifier.train(was_training)
    return torch.cat(chunks).reshape(rows, cols, -1)


def segment(
    classifier: nn.Module, image: torch.Tensor, config: SegmentationConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Segment one image.

    Args:
        classifier: Trained classifier whose input size equals config.window
        image: C x H x W tensor with values in [-1, 1]
        config: Window, stride and smoothing settings

    Returns:
        (class_map rows x cols, prob_maps L x rows x cols)

    Raises:
        ValidationError: Image smaller than the window, or window != classifier input
    """
    if image.dim() != 3:
        raise ValidationError(f"expected a C x H x W image, got shape {tuple(image.shape)}")
    expected = getattr(classifier, "image_shape", None)
    if expected is not None and tuple(expected[1:]) != (config.window, config.window):
        raise ValidationError(f"window {config.window} does not match the classifier input {expected}")

    logits = window_logits(classifier, image, config)
    probs = torch.softmax(temperature_scale(logits.double(), config.temperature), dim=-1)
    prob_maps = probs.permute(2, 0, 1).numpy()
    if config.gaussian_sigma > 0:
        prob_maps = np.stack([gaussian_filter(p, sigma=config.gaussian_sigma, mode="nearest") for p in prob_maps])
    prob_maps = prob_maps / prob_maps.sum(axis=0, keepdims=True)
    num_classes = prob_maps.shape[0]
    class_map = mode_filter(prob_maps.argmax(axis=0), config.mode_filter_radius, num_classes)
    logger.info(
        f"Segmented {image.shape[1]}x{image.shape[2]} image into a {class_map.shape[0]}x{class_map.shape[1]} grid",
        extra={"grid_rows": class_map.shape[0], "grid_cols": class_map.shape[1]},
    )
    return class_map, prob_maps


# ============ OUTPUT FILES ============


def _palette(num_classes: int) -> List[Tuple[int, int, int]]:
    """Distinct colours from matplotlib's tab20."""
    from matplotlib import colormaps

    cmap = colormaps["tab20"]
    return [tuple(int(255 * v) for v in cmap(i % 20)[:3]) for i in range(num_classes)]


def write_segmentation(
    class_map: np.ndarray,
    prob_maps: np.ndarray,
    class_names: Sequence[str],
    directory: Union[str, Path],
    stem: str = "segmentation",
) -> Dict[str, Path]:
    """
    Indexed-colour class map PNG, legend JSON, one grayscale PNG per class.

    Returns:
        {"class_map": path, "legend": path, "<class>": probability map path, ...}
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    palette = _palette(len(class_names))

    rows, cols = class_map.shape
    indexed = Image.frombytes("P", (cols, rows), np.ascontiguousarray(class_map, dtype=np.uint8).tobytes())
    indexed.putpalette([channel for colour in palette for channel in colour])
    paths: Dict[str, Path] = {"class_map": directory / f"{stem}_classes.png"}
    indexed.save(paths["class_map"])

    legend = {
        str(i): {"class": name, "rgb": list(palette[i])} for i, name in enumerate(class_names)
    }
    paths["legend"] = directory / f"{stem}_legend.json"
    paths["legend"].write_text(json.dumps(legend, indent=2), encoding="utf-8")

    for i, name in enumerate(class_names):
        gray = np.clip(np.rint(prob_maps[i] * 255.0), 0, 255).astype(np.uint8)
        path = directory / f"{stem}_prob_{name}.png"
        Image.fromarray(gray).save(path)
        paths[name] = path
    return paths
