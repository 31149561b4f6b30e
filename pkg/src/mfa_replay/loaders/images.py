"""
Image dataset loader and exporter.

On-disk layout of one domain:

    root/<class_name>/*.png      labeled domain (the source)
    root/*.png                   unlabeled domain (a target)
    root/sealed_labels.json      optional ground truth of an unlabeled domain,
                                 attached as SealedLabels for evaluation only
    root/manifest.json           sample ids, split assignment and checksum

PNG and JPEG files are accepted. Every image is center-cropped to crop_size
and rescaled from [0, 255] to [-1, 1].
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from mfa_replay.data.types import (
    SPLIT_NAMES,
    ClassTaxonomy,
    DomainDataset,
    DomainSequence,
    SealedLabels,
    make_splits,
)
from mfa_replay.errors import ImageReadError, ManifestChecksumError, TaxonomyMismatchError, ValidationError
from mfa_replay.utils.retry import call_with_io_retry

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_NAME = "manifest.json"
SEALED_LABELS_NAME = "sealed_labels.json"
MANIFEST_VERSION = 2


# ============ SINGLE IMAGES ============


def center_crop_box(width: int, height: int, crop_size: int) -> Tuple[int, int, int, int]:
    """(left, top, right, bottom) of the centered crop_size window."""
    left = (width - crop_size) // 2
    top = (height - crop_size) // 2
    return left, top, left + crop_size, top + crop_size


def _decode(path: Path) -> Image.Image:
    with open(path, "rb") as f:
        image = Image.open(f)
        image.load()
    return image.convert("RGB")


def read_image(path: Union[str, Path], crop_size: Optional[int] = None) -> torch.Tensor:
    """
    Read one image as a C x H x W float32 tensor in [-1, 1].

    Args:
        path: PNG, JPEG (or TIFF for segmentation inputs)
        crop_size: Center-crop to this side; None keeps the full image

    Raises:
        ImageReadError: The file cannot be decoded
        ValidationError: The image is smaller than crop_size
    """
    path = Path(path)
    try:
        image = call_with_io_retry(_decode, path)
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise ImageReadError(path, str(e)) from e

    if crop_size is not None:
        width, height = image.size
        if crop_size > min(width, height):
            raise ValidationError(
                f"crop_size {crop_size} exceeds image {path} of size {width}x{height}"
            )
        image = image.crop(center_crop_box(width, height, crop_size))

    pixels = np.asarray(image, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))


def write_image(images: torch.Tensor, path: Union[str, Path]) -> None:
    """Write a C x H x W tensor in [-1, 1] as an 8-bit RGB image."""
    pixels = ((images.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    array = pixels.permute(1, 2, 0).numpy()
    if array.shape[2] == 1:
        array = array[:, :, 0]
    call_with_io_retry(Image.fromarray(array).save, str(path))


def _list_images(directory: Path) -> List[Path]:
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


# ============ MANIFESTS ============


def files_checksum(sample_ids: Sequence[str], files: Sequence[Path]) -> str:
    """sha256 over (sample id, file bytes) pairs in sample-id order; independent of crop size."""
    digest = hashlib.sha256()
    for sample_id, path in sorted(zip(sample_ids, files)):
        digest.update(sample_id.encode("utf-8"))
        digest.update(hashlib.sha256(call_with_io_retry(Path(path).read_bytes)).digest())
    return digest.hexdigest()


def write_manifest(dataset: DomainDataset, path: Union[str, Path], files: Sequence[Path]) -> Path:
    """
    Write sample ids, split assignment and file checksum of a dataset as JSON.

    files holds the image file of each sample, aligned with dataset.sample_ids.
    """
    path = Path(path)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "domain_index": dataset.domain_index,
        "classes": list(dataset.taxonomy.names),
        "labeled": dataset.is_labeled,
        "image_shape": list(dataset.image_shape),
        "sample_ids": list(dataset.sample_ids),
        "splits": {name: list(dataset.split_ids(name)) for name in SPLIT_NAMES},
        "files_sha256": files_checksum(dataset.sample_ids, files),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(manifest, indent=2)
    call_with_io_retry(path.write_text, payload, encoding="utf-8")
    return path


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a manifest written by write_manifest."""
    path = Path(path)
    try:
        manifest = json.loads(call_with_io_retry(path.read_text, encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"Manifest {path} is not valid JSON: {e}") from e
    missing = {"sample_ids", "splits"} - set(manifest)
    if missing:
        raise ValidationError(f"Manifest {path} lacks keys {sorted(missing)}")
    return manifest


def _splits_from_manifest(
    manifest: Dict[str, Any], sample_ids: Sequence[str]
) -> Optional[Dict[str, np.ndarray]]:
    if sorted(manifest["sample_ids"]) != sorted(sample_ids):
        return None
    position = {sid: i for i, sid in enumerate(sample_ids)}
    try:
        return {
            name: np.sort(np.asarray([position[s] for s in manifest["splits"][name]], dtype=np.int64))
            for name in SPLIT_NAMES
        }
    except KeyError:
        return None


# ============ DATASETS ============


def load_dataset(
    root: Union[str, Path],
    taxonomy: ClassTaxonomy,
    labeled: bool,
    crop_size: int,
    domain_index: int = 0,
    seed: int = 0,
    split_ratios: Sequence[float] = (0.7, 0.15, 0.15),
) -> DomainDataset:
    """
    Load one domain from disk.

    Args:
        root: Domain directory
        taxonomy: Class names shared by the experiment
        labeled: Class sub-directories (True) or a flat pool (False)
        crop_size: Center-crop side in pixels
        domain_index: Position in the domain sequence
        seed: Split seed (ignored when a matching manifest exists)
        split_ratios: train/val/test fractions

    Returns:
        DomainDataset; labels only if `labeled`

    Raises:
        TaxonomyMismatchError: A class directory is not in the taxonomy
        ImageReadError: An image cannot be decoded
        ValidationError: A taxonomy class has no directory or no images, or the pool is empty
        ManifestChecksumError: The image files differ from those recorded in manifest.json
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {root}")

    files: List[Path] = []
    sample_ids: List[str] = []
    label_list: List[int] = []

    if labeled:
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        unknown = [p.name for p in class_dirs if p.name not in taxonomy.names]
        if unknown:
            raise TaxonomyMismatchError(
                f"Class directories {unknown} in {root} are not in the taxonomy {taxonomy.names}"
            )
        for name in taxonomy.names:
            class_dir = root / name
            images = _list_images(class_dir) if class_dir.is_dir() else []
            if not images:
                raise ValidationError(f"Class '{name}' has no images under {class_dir}")
            for image_path in images:
                files.append(image_path)
                sample_ids.append(f"{name}/{image_path.stem}")
                label_list.append(taxonomy.index(name))
    else:
        files = _list_images(root)
        sample_ids = [p.stem for p in files]

    if not files:
        raise ValidationError(f"No images found under {root}")

    images = torch.stack([read_image(p, crop_size) for p in files])
    labels = torch.as_tensor(label_list, dtype=torch.long) if labeled else None

    sealed = None
    sealed_path = root / SEALED_LABELS_NAME
    if not labeled and sealed_path.is_file():
        sealed = _read_sealed_labels(sealed_path, sample_ids, taxonomy)

    splits = None
    manifest_path = root / MANIFEST_NAME
    if manifest_path.is_file():
        manifest = read_manifest(manifest_path)
        splits = _splits_from_manifest(manifest, sample_ids)
        if splits is None:
            logger.warning(f"Manifest {manifest_path} does not match the images on disk; re-splitting")
        elif "files_sha256" in manifest:
            actual = files_checksum(sample_ids, files)
            if actual != manifest["files_sha256"]:
                raise ManifestChecksumError(manifest_path, manifest["files_sha256"], actual)
    if splits is None:
        strata = labels.numpy() if labels is not None else None
        splits = make_splits(len(files), split_ratios, seed, strata=strata)

    logger.info(
        f"Loaded domain {domain_index} from {root}: {len(files)} images",
        extra={"domain": domain_index, "labeled": labeled, "num_images": len(files)},
    )
    return DomainDataset(
        domain_index=domain_index,
        taxonomy=taxonomy,
        images=images,
        sample_ids=tuple(sample_ids),
        splits=splits,
        labels=labels,
        sealed_labels=sealed,
        root=root,
    )


def _read_sealed_labels(
    path: Path, sample_ids: Sequence[str], taxonomy: ClassTaxonomy
) -> Optional[SealedLabels]:
    mapping = json.loads(call_with_io_retry(path.read_text, encoding="utf-8"))
    if set(mapping) != set(sample_ids):
        logger.warning(f"Sealed labels in {path} do not cover the image pool; ignoring them")
        return None
    return SealedLabels(torch.as_tensor([taxonomy.index(mapping[s]) for s in sample_ids]))


def export_sequence(sequence: DomainSequence, root: Union[str, Path]) -> List[Path]:
    """
    Write a domain sequence to disk in the loader's layout.

    The source goes into class sub-directories; targets become flat pools
    with their ground truth kept in sealed_labels.json. Each domain gets a
    manifest so reloading reproduces the same splits.

    Returns:
        One directory per domain, in order
    """
    root = Path(root)
    names = sequence.taxonomy.names
    directories: List[Path] = []
    for dataset in sequence.domains:
        domain_dir = root / f"domain_{dataset.domain_index}"
        domain_dir.mkdir(parents=True, exist_ok=True)
        if dataset.is_labeled:
            assert dataset.labels is not None
            for y in sorted(set(dataset.labels.tolist())):
                (domain_dir / names[y]).mkdir(exist_ok=True)
            relative = [
                f"{names[int(y)]}/{sid}" for sid, y in zip(dataset.sample_ids, dataset.labels)
            ]
        else:
            relative = list(dataset.sample_ids)
            if dataset.sealed_labels is not None:
                hidden = dataset.sealed_labels.reveal()
                sealed = {sid: names[int(y)] for sid, y in zip(dataset.sample_ids, hidden)}
                call_with_io_retry(
                    (domain_dir / SEALED_LABELS_NAME).write_text,
                    json.dumps(sealed, indent=1),
                    encoding="utf-8",
                )
        written = [domain_dir / f"{rel}.png" for rel in relative]
        for path, image in zip(written, dataset.images):
            write_image(image, path)

        # ids as load_dataset will derive them from the file names
        exported = DomainDataset(
            domain_index=dataset.domain_index,
            taxonomy=dataset.taxonomy,
            images=dataset.images,
            sample_ids=tuple(relative),
            splits=dataset.splits,
            labels=dataset.labels,
        )
        write_manifest(exported, domain_dir / MANIFEST_NAME, written)
        directories.append(domain_dir)
        logger.info(
            f"Exported domain {dataset.domain_index} to {domain_dir}",
            extra={"domain": dataset.domain_index, "num_images": len(dataset)},
        )
    return directories

