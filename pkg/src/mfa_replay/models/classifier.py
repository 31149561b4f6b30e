"""
Residual classifier M = f(h(x)) with named feature taps.

The feature extractor h is a ResNet-style network: a stem (conv1/bn1 and an
optional max-pool) followed by four residual stages layer1..layer4 built from
torchvision's BasicBlock. The output of each stage is exposed as a tap
("stage1".."stage4") for the discriminator. The head f average-pools the last
stage and applies two linear layers.

Module names mirror torchvision's resnet so the "full" preset can load a
ResNet-18 state dict (see load_pretrained_backbone).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.resnet import BasicBlock

from mfa_replay.config import TAP_NAMES, ModelConfig
from mfa_replay.errors import NumericError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TapSpec:
    """Declared shape of one feature tap (per sample)."""

    name: str
    channels: int
    height: int
    width: int

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.channels, self.height, self.width


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Classifier(nn.Module):
    """
    Residual CNN exposing one tap per stage.

    Args:
        num_classes: Number of logits L
        image_shape: (C, H, W) of the inputs
        arch: Widths, depths and stem of the network
    """

    def __init__(self, num_classes: int, image_shape: Sequence[int], arch: ModelConfig):
        super().__init__()
        if num_classes < 2:
            raise ValidationError("a classifier needs at least 2 classes")
        channels, height, width = (int(v) for v in image_shape)
        if channels != arch.in_channels:
            raise ValidationError(
                f"images have {channels} channels but the preset expects {arch.in_channels}"
            )
        self.num_classes = num_classes
        self.image_shape = (channels, height, width)
        self.arch = arch

        k = arch.stem_kernel
        self.conv1 = nn.Conv2d(channels, arch.widths[0], k, arch.stem_stride, k // 2, bias=False)
        self.bn1 = nn.BatchNorm2d(arch.widths[0])
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1) if arch.stem_pool else nn.Identity()

        self._inplanes = arch.widths[0]
        self.layer1 = self._make_layer(arch.widths[0], arch.blocks[0], stride=1)
        self.layer2 = self._make_layer(arch.widths[1], arch.blocks[1], stride=2)
        self.layer3 = self._make_layer(arch.widths[2], arch.blocks[2], stride=2)
        self.layer4 = self._make_layer(arch.widths[3], arch.blocks[3], stride=2)

        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Sequential(
            nn.Linear(arch.widths[3], arch.head_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(arch.head_hidden, num_classes),
        )

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.constant_(m.weight, 1)
                nn.init.constant_(m.bias, 0)

        self._tap_spec = self._compute_tap_spec()

    def _make_layer(self, planes: int, blocks: int, stride: int) -> nn.Sequential:
        downsample = None
        if stride != 1 or self._inplanes != planes:
            downsample = nn.Sequential(
                nn.Conv2d(self._inplanes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )
        layers = [BasicBlock(self._inplanes, planes, stride, downsample)]
        self._inplanes = planes
        layers.extend(BasicBlock(planes, planes) for _ in range(1, blocks))
        return nn.Sequential(*layers)

    def _compute_tap_spec(self) -> List[TapSpec]:
        _, h, w = self.image_shape
        k, s = self.arch.stem_kernel, self.arch.stem_stride
        h, w = _conv_out(h, k, s, k // 2), _conv_out(w, k, s, k // 2)
        if self.arch.stem_pool:
            h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
        spec = []
        for index, (name, channels) in enumerate(zip(TAP_NAMES, self.arch.widths)):
            if index > 0:
                h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
            spec.append(TapSpec(name, channels, h, w))
        return spec

    @property
    def tap_spec(self) -> List[TapSpec]:
        return list(self._tap_spec)

    def tap(self, name: str) -> TapSpec:
        for spec in self._tap_spec:
            if spec.name == name:
                return spec
        raise ValidationError(f"unknown tap '{name}', expected one of {TAP_NAMES}")

    def _check_input(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or tuple(images.shape[1:]) != self.image_shape:
            raise ValidationError(
                f"expected images of shape N x {self.image_shape}, got {tuple(images.shape)}"
            )

    def features(self, images: torch.Tensor) -> Dict[str, torch.Tensor]:
        """h(x): the feature maps of every tap."""
        self._check_input(images)
        x = self.maxpool(self.relu(self.bn1(self.conv1(images))))
        taps: Dict[str, torch.Tensor] = {}
        for name, stage in zip(TAP_NAMES, (self.layer1, self.layer2, self.layer3, self.layer4)):
            x = stage(x)
            taps[name] = x
        return taps

    def classify(self, final_features: torch.Tensor) -> torch.Tensor:
        """f(.): logits from the last tap."""
        return self.head(torch.flatten(self.avgpool(final_features), 1))

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        taps = self.features(images)
        return self.classify(taps[TAP_NAMES[-1]]), taps


# ============ OUTPUT HELPERS ============


def pool_tap(feature_map: torch.Tensor) -> torch.Tensor:
    """N x C x H x W -> N x C spatial mean."""
    return torch.flatten(F.adaptive_avg_pool2d(feature_map, 1), 1)


def pooled_features(classifier: nn.Module, images: torch.Tensor, tap: str = "stage4") -> torch.Tensor:
    """N x C average-pooled features of one tap."""
    _, taps = classifier(images)
    if tap not in taps:
        raise ValidationError(f"unknown tap '{tap}'")
    return pool_tap(taps[tap])


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last dimension with max-subtraction."""
    if not torch.isfinite(logits).all():
        raise NumericError("softmax_probs received non-finite logits")
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=-1, keepdim=True)


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor, floor: float = 1e-12) -> torch.Tensor:
    """
    Mean negative log-probability of the true class.

    Args:
        probs: N x L probabilities
        labels: N class indices
        floor: Lower clamp of the log argument

    Raises:
        ValidationError: A label is outside [0, L) or lengths differ
    """
    if probs.dim() != 2 or labels.shape != (probs.shape[0],):
        raise ValidationError(
            f"cross_entropy expects N x L probs and N labels, got {tuple(probs.shape)} and {tuple(labels.shape)}"
        )
    labels = labels.to(torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValidationError(f"labels must lie in [0, {probs.shape[1]})")
    true_class = probs.gather(1, labels[:, None]).squeeze(1)
    return -torch.log(true_class.clamp_min(floor)).mean()


def pseudo_label(probs: torch.Tensor) -> torch.Tensor:
    """Argmax over classes; ties resolve to the lowest index."""
    return torch.argmax(probs, dim=-1)


def logit_distillation(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over batch and logit dimensions."""
    if student_logits.shape != teacher_logits.shape:
        raise ValidationError(
            f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    return (student_logits - teacher_logits).abs().mean()


# ============ PRETRAINED WEIGHTS ============


def load_pretrained_backbone(classifier: Classifier, path: Union[str, Path]) -> List[str]:
    """
    Load a torchvision ResNet state dict into the feature extractor.

    The torchvision "fc" layer is skipped; the two-layer head keeps its
    initialization. Nothing is downloaded.

    Returns:
        Names of the parameters that were loaded

    Raises:
        ValidationError: A backbone tensor has a different shape
    """
    state = torch.load(Path(path), map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    own = classifier.state_dict()
    loaded: Dict[str, torch.Tensor] = {}
    for key, value in state.items():
        if key.startswith("fc.") or key not in own:
            continue
        if own[key].shape != value.shape:
            raise ValidationError(
                f"pretrained tensor '{key}' has shape {tuple(value.shape)}, expected {tuple(own[key].shape)}"
            )
        loaded[key] = value
    classifier.load_state_dict(loaded, strict=False)
    logger.info(
        f"Loaded {len(loaded)} pretrained backbone tensors from {path}",
        extra={"num_tensors": len(loaded)},
    )
    return sorted(loaded)
