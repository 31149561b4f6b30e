"""
Configuration management for mfa-replay.

All knobs live here so that nothing is scattered through the training code.
There are two layers:

- RuntimeConfig: process-level settings read from environment variables
  (optionally from a `.env` file via python-dotenv): where outputs go, how
  much we log, which device to train on.
- Experiment settings: pydantic models (TrainingConfig, SegmentationConfig,
  DataSpec, ExperimentRecipe) that are loaded from YAML recipe files and
  overridden from the command line with dotted keys such as
  `--train.lambda_ld 1.0`. Precedence is CLI > file > defaults.

Everything that influences a trained model is part of TrainingConfig, and
config_hash() fingerprints it so checkpoints can refuse to be resumed under a
different configuration.
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from mfa_replay.errors import UsageError

load_dotenv()

TAP_NAMES: Tuple[str, ...] = ("stage1", "stage2", "stage3", "stage4")


class RuntimeConfig:
    """
    Process-level settings read from the environment.

    Usage:
        root = RuntimeConfig.OUTPUT_ROOT
        RuntimeConfig.validate_required()
    """

    # ============ OUTPUT SETTINGS ============

    # Root directory under which every recipe writes its per-seed folders
    OUTPUT_ROOT: str = os.getenv("MFA_OUTPUT_ROOT", "runs")

    # ============ LOGGING SETTINGS ============

    LOG_LEVEL: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = os.getenv(  # type: ignore[assignment]
        "LOG_LEVEL", "INFO"
    )
    # JSON lines on the console; plain text is easier to read interactively
    LOG_JSON: bool = os.getenv("LOG_JSON", "true").lower() in ("1", "true", "yes")

    # ============ COMPUTE SETTINGS ============

    # "auto" picks cuda when available
    DEVICE: str = os.getenv("MFA_DEVICE", "auto")
    NUM_WORKERS: int = int(os.getenv("MFA_NUM_WORKERS", "0"))

    # ============ I/O SETTINGS ============

    # Attempts for transient filesystem errors (see utils/retry.py)
    IO_RETRIES: int = int(os.getenv("MFA_IO_RETRIES", "3"))

    @classmethod
    def reload(cls) -> None:
        """Re-read the environment (used after the CLI changes variables)."""
        cls.OUTPUT_ROOT = os.getenv("MFA_OUTPUT_ROOT", "runs")
        cls.LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")  # type: ignore[assignment]
        cls.LOG_JSON = os.getenv("LOG_JSON", "true").lower() in ("1", "true", "yes")
        cls.DEVICE = os.getenv("MFA_DEVICE", "auto")
        cls.NUM_WORKERS = int(os.getenv("MFA_NUM_WORKERS", "0"))
        cls.IO_RETRIES = int(os.getenv("MFA_IO_RETRIES", "3"))

    @classmethod
    def validate_required(cls) -> None:
        """
        Validate the runtime settings before anything is trained.

        Raises:
            ValueError: If a setting is missing or out of range
        """
        if not cls.OUTPUT_ROOT:
            raise ValueError("Required configuration 'MFA_OUTPUT_ROOT' is missing")
        if cls.LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ValueError(f"LOG_LEVEL must be DEBUG, INFO, WARNING or ERROR, got {cls.LOG_LEVEL}")
        if cls.NUM_WORKERS < 0:
            raise ValueError("MFA_NUM_WORKERS must be >= 0")
        if cls.IO_RETRIES < 1:
            raise ValueError("MFA_IO_RETRIES must be >= 1")

    @classmethod
    def resolve_device(cls) -> str:
        import torch

        if cls.DEVICE == "auto":
            return "cuda" if torch.cuda.is_available() else "cpu"
        return cls.DEVICE

    @classmethod
    def to_dict(cls) -> dict:
        """Return all runtime settings as a dictionary (for logging)."""
        return {
            "MFA_OUTPUT_ROOT": cls.OUTPUT_ROOT,
            "LOG_LEVEL": cls.LOG_LEVEL,
            "LOG_JSON": cls.LOG_JSON,
            "MFA_DEVICE": cls.DEVICE,
            "MFA_NUM_WORKERS": cls.NUM_WORKERS,
            "MFA_IO_RETRIES": cls.IO_RETRIES,
        }


# ============ MODEL PRESETS ============


class ModelConfig(BaseModel):
    """Architecture of the classifier and the GAN."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Classifier: stem + four residual stages (tap points) + two-layer head
    widths: Tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks: Tuple[int, int, int, int] = (1, 1, 1, 1)
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False
    head_hidden: int = 128
    in_channels: int = 3

    # Generator
    noise_dim: int = 64
    embed_dim: int = 32
    style_dim: int = 128
    generator_channels: int = 64
    style_layers: int = Field(default=9, ge=2)

    # Discriminator
    discriminator_width: int = 64
    discriminator_layers: int = Field(default=7, ge=2)
    fusion_init_scale: float = Field(default=0.1, gt=0)


PRESETS: Dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "full": ModelConfig(
        widths=(64, 128, 256, 512),
        blocks=(2, 2, 2, 2),
        stem_kernel=7,
        stem_stride=2,
        stem_pool=True,
        head_hidden=256,
        noise_dim=128,
        embed_dim=64,
        style_dim=256,
        generator_channels=256,
        discriminator_width=256,
    ),
}


# ============ TRAINING ============


class AugmentationPolicy(BaseModel):
    """Enabled transforms and their parameter ranges. All zero = identity."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    crop_padding: int = Field(default=0, ge=0)
    hflip_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    vflip_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    affine_degrees: float = Field(default=0.0, ge=0.0)
    affine_translate: float = Field(default=0.0, ge=0.0, lt=1.0)
    affine_scale: Tuple[float, float] = (1.0, 1.0)

    @property
    def is_identity(self) -> bool:
        return (
            self.crop_padding == 0
            and self.hflip_prob == 0.0
            and self.vflip_prob == 0.0
            and self.affine_degrees == 0.0
            and self.affine_translate == 0.0
            and tuple(self.affine_scale) == (1.0, 1.0)
        )


DEFAULT_AUGMENTATION = AugmentationPolicy(
    crop_padding=4,
    hflip_prob=0.5,
    vflip_prob=0.5,
    affine_degrees=10.0,
    affine_translate=0.05,
    affine_scale=(0.95, 1.05),
)


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # RAdam + linear warmup + cosine decay for the classifier
    classifier_lr: float = Field(default=1e-3, gt=0)
    adaptation_lr: float = Field(default=1e-4, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    warmup_fraction: float = Field(default=0.05, ge=0, lt=1)
    # Adam for the GAN (and for the discriminator during classifier adaptation)
    generator_lr: float = Field(default=2e-4, gt=0)
    discriminator_lr: float = Field(default=3e-4, gt=0)
    adam_betas: Tuple[float, float] = (0.0, 0.99)


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_ld: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0], min_length=1)
    lambda_id: List[float] = Field(default_factory=lambda: [0.5, 1.0, 1.5], min_length=1)
    lambda_r1: List[float] = Field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0], min_length=1)

    @field_validator("lambda_ld", "lambda_id", "lambda_r1")
    @classmethod
    def _non_negative(cls, values: List[float]) -> List[float]:
        if any(v < 0 for v in values):
            raise ValueError("grid weights must be >= 0")
        return values


class TrainingConfig(BaseModel):
    """Every setting that shapes a trained model."""

    model_config = ConfigDict(extra="forbid")

    # Loss weights
    lambda_ld: float = Field(default=1.0, ge=0)
    lambda_id: float = Field(default=1.0, ge=0)
    lambda_r1: float = Field(default=1.0, ge=0)
    grid: GridConfig = Field(default_factory=GridConfig)

    # Schedules
    batch_size: int = Field(default=16, ge=2)
    max_epochs: int = Field(default=200, ge=0)
    steps_per_epoch: Optional[int] = Field(default=None, ge=1)
    patience: int = Field(default=10, ge=1)
    source_gan_steps: int = Field(default=20_000, ge=0)
    target_gan_steps: int = Field(default=10_000, ge=0)
    gan_eval_interval: int = Field(default=1_000, ge=1)
    ema_decay: float = Field(default=0.999, ge=0, lt=1)
    divergence_threshold: float = Field(default=1e4, gt=0)
    log_floor: float = Field(default=1e-12, gt=0)

    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    augmentation: AugmentationPolicy = DEFAULT_AUGMENTATION

    # Architecture
    preset: Literal["desk", "full"] = "desk"
    model: Optional[ModelConfig] = None
    mfa_taps: List[str] = Field(default_factory=lambda: list(TAP_NAMES), min_length=1)
    gan_tap: str = "stage2"
    uda_tap: str = "stage4"
    pretrained_backbone: Optional[Path] = None

    # Ablations
    disable_cg: bool = False
    disable_mfa: bool = False
    disable_adaptation: bool = False

    seed: int = 0

    @model_validator(mode="after")
    def _resolve(self) -> "TrainingConfig":
        if self.model is None:
            self.model = PRESETS[self.preset]
        for tap in [*self.mfa_taps, self.gan_tap, self.uda_tap]:
            if tap not in TAP_NAMES:
                raise ValueError(f"unknown tap '{tap}', expected one of {TAP_NAMES}")
        return self

    @property
    def architecture(self) -> ModelConfig:
        assert self.model is not None
        return self.model

    def gan_taps(self) -> List[str]:
        """Taps the GAN discriminator consumes."""
        return [self.gan_tap] if self.disable_mfa else list(self.mfa_taps)

    def uda_taps(self) -> List[str]:
        """Taps the domain-alignment discriminator consumes."""
        return [self.uda_tap] if self.disable_mfa else list(self.mfa_taps)


class SegmentationConfig(BaseModel):
    """Sliding-window segmentation settings. stride defaults to window // 4."""

    model_config = ConfigDict(extra="forbid")

    window: int = Field(default=32, ge=1)
    stride: Optional[int] = Field(default=None, ge=1)
    temperature: float = Field(default=2.0, gt=0)
    gaussian_sigma: float = Field(default=1.5, ge=0)
    mode_filter_radius: int = Field(default=2, ge=0)
    batch_size: int = Field(default=256, ge=1)

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride is not None else max(1, self.window // 4)


# ============ DATA / RECIPES ============


class DataSpec(BaseModel):
    """Where the domain sequence comes from."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["toy", "directory"] = "toy"
    # Toy sequence
    num_domains: int = Field(default=3, ge=2)
    num_classes: int = Field(default=4, ge=2)
    samples_per_domain: int = Field(default=2000, ge=2)
    image_size: int = Field(default=32, ge=8)
    drop_classes: List[int] = Field(default_factory=list)
    toy_seed: int = 7
    # Directory sequence: roots[0] is the labeled source
    roots: List[Path] = Field(default_factory=list)
    class_names: List[str] = Field(default_factory=list)
    crop_size: int = Field(default=128, ge=1)
    # Shared
    split_ratios: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_seed: int = 0
    data_root: Optional[Path] = None

    @field_validator("split_ratios")
    @classmethod
    def _ratios(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(r < 0 for r in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("split_ratios must be non-negative and sum to 1")
        return value


class ExperimentRecipe(BaseModel):
    """Named preset bundling a domain sequence, a TrainingConfig, seeds and an output dir."""

    model_config = ConfigDict(extra="forbid")

    name: str
    data: DataSpec = Field(default_factory=DataSpec)
    train: TrainingConfig = Field(default_factory=TrainingConfig)
    segmentation: SegmentationConfig = Field(default_factory=SegmentationConfig)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: Optional[Path] = None

    def resolved_output_dir(self) -> Path:
        """Absolute output directory; relative paths are anchored at MFA_OUTPUT_ROOT."""
        base = Path(RuntimeConfig.OUTPUT_ROOT)
        out = self.output_dir if self.output_dir is not None else Path(self.name)
        if not out.is_absolute():
            out = base / out
        return out.resolve()

    def resolved_data_root(self) -> Path:
        root = self.data.data_root if self.data.data_root is not None else Path("data")
        if not root.is_absolute():
            root = self.resolved_output_dir() / root
        return root.resolve()


# ============ HELPERS ============


def config_hash(config: BaseModel) -> str:
    """Fingerprint of a configuration: sha256 of its canonical JSON dump."""
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def parse_override_value(raw: str) -> Any:
    """Parse a command-line value as a YAML scalar/list ("1.0" -> 1.0, "[1, 2]" -> [1, 2])."""
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def apply_overrides(mapping: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """
    Apply dotted-key overrides to a nested mapping.

    Args:
        mapping: Nested dict (e.g. a recipe loaded from YAML)
        overrides: {"train.lambda_ld": 1.0, ...}

    Returns:
        A new nested dict with the overrides applied

    Raises:
        UsageError: If a key is empty or walks through a non-mapping value
    """
    result: Dict[str, Any] = json.loads(json.dumps(mapping, default=str))
    for dotted, value in overrides.items():
        parts = [p for p in dotted.split(".") if p]
        if not parts:
            raise UsageError(f"Invalid override key '{dotted}'")
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise UsageError(f"Override '{dotted}' walks through non-section '{part}'")
            node = child
        node[parts[-1]] = value
    return result


def recipe_from_mapping(data: Mapping[str, Any]) -> ExperimentRecipe:
    """Validate a recipe mapping; unknown keys become UsageError."""
    try:
        return ExperimentRecipe.model_validate(data)
    except ValidationError as exc:
        raise UsageError(f"Invalid recipe: {exc}") from exc


def load_recipe_file(path: Path) -> Dict[str, Any]:
    """Read a YAML recipe file into a plain mapping."""
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise UsageError(f"Recipe file {path} must contain a mapping")
    data.setdefault("name", Path(path).stem)
    return data


def grid_points(grid: GridConfig) -> Sequence[Dict[str, float]]:
    """Cartesian product of the grid, in a stable order."""
    return [
        {"lambda_ld": ld, "lambda_id": lid, "lambda_r1": r1}
        for ld in grid.lambda_ld
        for lid in grid.lambda_id
        for r1 in grid.lambda_r1
    ]
