"""
Loaders for image domains stored on disk.

Contains the directory-layout reader/writer used by the CLI and the
data-access audit.
"""

from .images import (
    MANIFEST_NAME,
    SEALED_LABELS_NAME,
    center_crop_box,
    export_sequence,
    files_checksum,
    load_dataset,
    read_image,
    read_manifest,
    write_image,
    write_manifest,
)

__all__ = [
    "MANIFEST_NAME",
    "SEALED_LABELS_NAME",
    "center_crop_box",
    "export_sequence",
    "files_checksum",
    "load_dataset",
    "read_image",
    "read_manifest",
    "write_image",
    "write_manifest",
]
