"""Checkpoint bundles and experiment records."""

from .checkpoints import (
    FORMAT_VERSION,
    CheckpointBundle,
    coverage_tag,
    load_checkpoint,
    load_module,
    module_tensors,
    parse_coverage,
    save_checkpoint,
)
from .records import ExperimentRecorder, load_record

__all__ = [
    "FORMAT_VERSION",
    "CheckpointBundle",
    "ExperimentRecorder",
    "coverage_tag",
    "load_checkpoint",
    "load_module",
    "load_record",
    "module_tensors",
    "parse_coverage",
    "save_checkpoint",
]
