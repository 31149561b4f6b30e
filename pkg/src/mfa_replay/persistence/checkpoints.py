"""
Single-file checkpoint bundles (.ckpt).

Layout:

    8 bytes   magic b"MFARCKPT"
    4 bytes   header length H (uint32, little endian)
    H bytes   UTF-8 JSON header
    ...       parameter blob: raw little-endian tensor buffers back to back

The header carries the format version, the bundle kind ("classifier" or
"gan"), an architecture descriptor, the domain-coverage tag "0:t", the step
counter, the configuration hash, a tensor table (name, dtype, shape, offset,
nbytes) and the sha256 of the blob. docs/checkpoint_format.md documents it.

Files are written to a temporary sibling and renamed into place, so a crash
never leaves a partial checkpoint behind.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from mfa_replay.errors import (
    CheckpointError,
    CheckpointHashError,
    CheckpointVersionError,
    CorruptCheckpointError,
    ValidationError,
)
from mfa_replay.utils.retry import call_with_io_retry

logger = logging.getLogger(__name__)

MAGIC = b"MFARCKPT"
FORMAT_VERSION = 1
KINDS = ("classifier", "gan")
_PREFIX = struct.Struct("<8sI")

_DTYPES: Dict[str, torch.dtype] = {
    "float16": torch.float16,
    "float32": torch.float32,
    "float64": torch.float64,
    "int8": torch.int8,
    "uint8": torch.uint8,
    "int16": torch.int16,
    "int32": torch.int32,
    "int64": torch.int64,
    "bool": torch.bool,
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def coverage_tag(last_domain: int) -> str:
    """Domains 0..last_domain as "0:last_domain"."""
    return f"0:{int(last_domain)}"


def parse_coverage(tag: str) -> int:
    """Last covered domain of a "0:t" tag."""
    try:
        first, last = tag.split(":")
        if int(first) != 0 or int(last) < 0:
            raise ValueError(tag)
        return int(last)
    except ValueError:
        raise ValidationError(f"invalid coverage tag '{tag}'") from None


@dataclass
class CheckpointBundle:
    """Parameters plus everything needed to rebuild and validate them."""

    kind: str
    tensors: Dict[str, torch.Tensor]
    architecture: Dict[str, Any]
    coverage: str
    step: int = 0
    config_hash: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValidationError(f"checkpoint kind must be one of {KINDS}, got '{self.kind}'")
        parse_coverage(self.coverage)

    @property
    def last_domain(self) -> int:
        return parse_coverage(self.coverage)

    def module_state(self, prefix: str) -> Dict[str, torch.Tensor]:
        """Tensors stored under `prefix.` with the prefix stripped."""
        head = prefix + "."
        return {k[len(head) :]: v for k, v in self.tensors.items() if k.startswith(head)}

    def has_module(self, prefix: str) -> bool:
        head = prefix + "."
        return any(k.startswith(head) for k in self.tensors)


def module_tensors(prefix: str, module: nn.Module) -> Dict[str, torch.Tensor]:
    """A module's state dict flattened under `prefix.`."""
    return {f"{prefix}.{k}": v.detach().cpu() for k, v in module.state_dict().items()}


def load_module(module: nn.Module, bundle: CheckpointBundle, prefix: str) -> nn.Module:
    """
    Load `prefix.*` tensors into a module built with the same architecture.

    Raises:
        CheckpointError: The tensors do not fit the module
    """
    state = bundle.module_state(prefix)
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint '{prefix}' does not match the architecture: {e}") from e
    return module


# ============ ENCODING ============


def _encode(bundle: CheckpointBundle) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name in sorted(bundle.tensors):
        tensor = bundle.tensors[name].detach().cpu().contiguous()
        if tensor.dtype not in _DTYPE_NAMES:
            raise ValidationError(f"tensor '{name}' has unsupported dtype {tensor.dtype}")
        raw = tensor.numpy().astype(tensor.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        table.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[tensor.dtype],
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = {
        "format_version": bundle.format_version,
        "kind": bundle.kind,
        "architecture": bundle.architecture,
        "coverage": bundle.coverage,
        "step": int(bundle.step),
        "config_hash": bundle.config_hash,
        "metadata": bundle.metadata,
        "tensors": table,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, len(header_bytes)) + header_bytes + blob


def _decode(data: bytes, path: Path) -> CheckpointBundle:
    if len(data) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path} is too short to be a checkpoint")
    magic, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path} is not a checkpoint (bad magic)")
    start = _PREFIX.size
    if start + header_len > len(data):
        raise CorruptCheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path} has an unreadable header: {e}") from e

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {version}, this build reads version {FORMAT_VERSION}"
        )

    blob = data[start + header_len :]
    try:
        expected = sum(int(entry["nbytes"]) for entry in header["tensors"])
        digest = header["blob_sha256"]
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptCheckpointError(f"{path} has an incomplete header: {e}") from e
    if len(blob) != expected:
        raise CorruptCheckpointError(f"{path} is truncated: blob has {len(blob)} of {expected} bytes")
    if hashlib.sha256(blob).hexdigest() != digest:
        raise CorruptCheckpointError(f"{path} failed its payload checksum")

    tensors: Dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=True))

    return CheckpointBundle(
        kind=header["kind"],
        tensors=tensors,
        architecture=header["architecture"],
        coverage=header["coverage"],
        step=header["step"],
        config_hash=header["config_hash"],
        metadata=header.get("metadata", {}),
        format_version=version,
    )


# ============ FILES ============


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save_checkpoint(bundle: CheckpointBundle, path: Union[str, Path]) -> Path:
    """Write a bundle atomically (temporary file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    call_with_io_retry(_write_atomic, path, _encode(bundle))
    logger.info(
        f"Checkpoint saved to {path}",
        extra={"kind": bundle.kind, "coverage": bundle.coverage, "step": bundle.step},
    )
    return path


def load_checkpoint(
    path: Union[str, Path],
    expected_config_hash: Optional[str] = None,
    expected_kind: Optional[str] = None,
) -> CheckpointBundle:
    """
    Read and validate a bundle.

    Args:
        path: .ckpt file
        expected_config_hash: Refuse bundles written under another configuration
        expected_kind: Refuse bundles of another kind

    Raises:
        FileNotFoundError: No such file
        CorruptCheckpointError: Truncated, bad magic or checksum failure
        CheckpointVersionError: Written by another format version
        CheckpointHashError: Configuration hash differs from the expected one
    """
    path = Path(path)

    def _read() -> bytes:
        with open(path, "rb") as f:
            return f.read()

    bundle = _decode(call_with_io_retry(_read), path)
    if expected_kind is not None and bundle.kind != expected_kind:
        raise CheckpointError(f"{path} holds a '{bundle.kind}' bundle, expected '{expected_kind}'")
    if expected_config_hash is not None and bundle.config_hash != expected_config_hash:
        raise CheckpointHashError(
            f"{path} was written under configuration {bundle.config_hash[:12]}, "
            f"refusing to resume under {expected_config_hash[:12]}"
        )
    return bundle
