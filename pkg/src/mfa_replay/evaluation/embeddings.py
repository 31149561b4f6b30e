"""Export pooled classifier features for external projection (t-SNE, UMAP)."""

import logging
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from mfa_replay.data.types import DomainDataset
from mfa_replay.evaluation.report import evaluation_labels, predict

logger = logging.getLogger(__name__)


def export_embeddings(
    classifier: nn.Module,
    datasets: Sequence[DomainDataset],
    per_class_sample_count: int,
    path: Union[str, Path],
    tap: str = "stage4",
    seed: int = 0,
    split: str = "test",
) -> Path:
    """
    Write a CSV with columns domain, class, feature_0..feature_{d-1}.

    For every (domain, class) a fixed-seed random subset of the split is
    taken; when fewer samples exist than requested, all of them are used and
    a warning is logged.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = []
    for dataset in datasets:
        split_idx = np.asarray(dataset.splits[split], dtype=np.int64)
        labels = evaluation_labels(dataset).numpy()[split_idx]
        chosen = []
        for cls in range(dataset.taxonomy.size):
            members = split_idx[labels == cls]
            if members.size == 0:
                continue
            if members.size < per_class_sample_count:
                logger.warning(
                    f"Domain {dataset.domain_index} class {cls}: {members.size} samples available, "
                    f"{per_class_sample_count} requested; taking all",
                    extra={"domain": dataset.domain_index, "class_index": cls},
                )
                chosen.append(members)
            else:
                rng = np.random.default_rng([seed, dataset.domain_index, cls])
                chosen.append(np.sort(rng.choice(members, size=per_class_sample_count, replace=False)))
        if not chosen:
            continue
        idx = np.concatenate(chosen)
        _, features = predict(classifier, dataset.images[torch.as_tensor(idx)], tap=tap)
        frame = pd.DataFrame(
            features.numpy(), columns=[f"feature_{i}" for i in range(features.shape[1])]
        )
        frame.insert(0, "class", [dataset.taxonomy.names[int(c)] for c in evaluation_labels(dataset).numpy()[idx]])
        frame.insert(0, "domain", dataset.domain_index)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["domain", "class"])
    table.to_csv(path, index=False, float_format="%.8g")
    logger.info(f"Exported {len(table)} embeddings to {path}", extra={"rows": len(table)})
    return path
