"""
Scoring a classifier over domains, and the reports built from the scores.

This is the only module that opens SealedLabels: target ground truth is
needed for scoring and nowhere else.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
import torch.nn as nn  # noqa: E402
from pydantic import BaseModel, Field, model_validator  # noqa: E402
from sklearn.metrics import confusion_matrix  # noqa: E402

from mfa_replay.data.types import DomainDataset  # noqa: E402
from mfa_replay.errors import ValidationError  # noqa: E402
from mfa_replay.evaluation.metrics import (  # noqa: E402
    davies_bouldin,
    per_class_f1,
    wasserstein_alignment,
    weighted_f1,
)
from mfa_replay.models.classifier import pool_tap  # noqa: E402

logger = logging.getLogger(__name__)

ALIGNMENT_SAMPLES_PER_DOMAIN = 1000


class MetricsReport(BaseModel):
    """Scores of one classifier over a set of domains."""

    per_domain_f1: Dict[int, float]
    per_class_f1: Dict[str, float]
    overall_f1: float
    alignment_distance: Optional[float] = None
    alignment: Optional[float] = None
    davies_bouldin_index: Optional[float] = None
    clustering: Optional[float] = None
    confusion: Dict[int, List[List[int]]] = Field(default_factory=dict)
    split: str = "test"
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self) -> "MetricsReport":
        values = [*self.per_domain_f1.values(), *self.per_class_f1.values(), self.overall_f1]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("F1 scores must lie in [0, 1]")
        if self.per_domain_f1:
            mean = float(np.mean(list(self.per_domain_f1.values())))
            if abs(mean - self.overall_f1) > 1e-9:
                raise ValueError("overall_f1 must equal the mean of per_domain_f1")
        return self


# ============ INFERENCE ============


def evaluation_labels(dataset: DomainDataset) -> torch.Tensor:
    """Ground truth for scoring: source labels, or the sealed target labels."""
    if dataset.labels is not None:
        return dataset.labels
    if dataset.sealed_labels is not None:
        return dataset.sealed_labels.reveal()
    raise ValidationError(f"domain {dataset.domain_index} has no labels to evaluate against")


@torch.no_grad()
def predict(
    classifier: nn.Module,
    images: torch.Tensor,
    batch_size: int = 256,
    tap: str = "stage4",
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Evaluation-mode logits and pooled features of `tap`, on CPU.

    The classifier's train/eval mode is restored afterwards.
    """
    device = next(classifier.parameters()).device
    was_training = classifier.training
    classifier.eval()
    logits, features = [], []
    try:
        for start in range(0, images.shape[0], batch_size):
            batch = images[start : start + batch_size].to(device)
            out, taps = classifier(batch)
            logits.append(out.cpu())
            features.append(pool_tap(taps[tap]).cpu())
    finally:
        classifier.train(was_training)
    if not logits:
        return torch.zeros(0), torch.zeros(0)
    return torch.cat(logits), torch.cat(features)


def _subset(n: int, limit: int, seed: int) -> np.ndarray:
    if n <= limit:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=limit, replace=False))


def evaluate(
    classifier: nn.Module,
    datasets: Sequence[DomainDataset],
    split: str = "test",
    batch_size: int = 256,
    metadata: Optional[Mapping[str, Any]] = None,
    tap: str = "stage4",
    seed: int = 0,
) -> MetricsReport:
    """
    Weighted F1 per domain and per class, alignment and clustering scores.

    Alignment (inverse sliced Wasserstein) and clustering (inverse
    Davies-Bouldin) use the pooled `tap` features; they are left empty when
    their preconditions do not hold (a single domain, a single class).
    """
    if not datasets:
        raise ValidationError("evaluate needs at least one domain")
    taxonomy = datasets[0].taxonomy
    num_classes = taxonomy.size

    per_domain: Dict[int, float] = {}
    confusion: Dict[int, List[List[int]]] = {}
    all_pred: List[np.ndarray] = []
    all_true: List[np.ndarray] = []
    features_by_domain: Dict[int, np.ndarray] = {}
    feature_rows: List[np.ndarray] = []
    feature_labels: List[np.ndarray] = []

    for dataset in datasets:
        idx = torch.as_tensor(dataset.splits[split], dtype=torch.long)
        if idx.numel() == 0:
            logger.warning(f"Domain {dataset.domain_index} has an empty '{split}' split; skipped")
            continue
        labels = evaluation_labels(dataset)[idx].numpy()
        logits, feats = predict(classifier, dataset.images[idx], batch_size=batch_size, tap=tap)
        preds = logits.argmax(dim=1).numpy()
        per_domain[dataset.domain_index] = weighted_f1(preds, labels, num_classes)
        confusion[dataset.domain_index] = confusion_matrix(
            labels, preds, labels=list(range(num_classes))
        ).tolist()
        all_pred.append(preds)
        all_true.append(labels)

        keep = _subset(len(labels), ALIGNMENT_SAMPLES_PER_DOMAIN, seed + dataset.domain_index)
        features_by_domain[dataset.domain_index] = feats.numpy()[keep]
        feature_rows.append(feats.numpy()[keep])
        feature_labels.append(labels[keep])

    if not per_domain:
        raise ValidationError(f"no domain has samples in the '{split}' split")

    class_scores = per_class_f1(np.concatenate(all_pred), np.concatenate(all_true), num_classes)

    alignment_distance = alignment = None
    if len(features_by_domain) >= 2 and all(len(f) >= 2 for f in features_by_domain.values()):
        alignment_distance, alignment = wasserstein_alignment(features_by_domain, seed=seed)

    db_index = clustering = None
    stacked_labels = np.concatenate(feature_labels)
    if np.unique(stacked_labels).size >= 2:
        db_index, clustering = davies_bouldin(np.concatenate(feature_rows), stacked_labels)

    overall = float(np.mean(list(per_domain.values())))
    return MetricsReport(
        per_domain_f1=per_domain,
        per_class_f1={name: float(s) for name, s in zip(taxonomy.names, class_scores)},
        overall_f1=overall,
        alignment_distance=alignment_distance,
        alignment=alignment,
        davies_bouldin_index=db_index,
        clustering=clustering,
        confusion=confusion,
        split=split,
        metadata=dict(metadata or {}),
    )


# ============ OUTPUTS ============


def write_report(report: MetricsReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path


def read_report(path: Union[str, Path]) -> MetricsReport:
    return MetricsReport.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


def write_confusion_matrices(
    report: MetricsReport, directory: Union[str, Path], class_names: Sequence[str]
) -> List[Path]:
    """One CSV per domain; rows are true classes, columns predicted classes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for domain, matrix in sorted(report.confusion.items()):
        frame = pd.DataFrame(matrix, index=list(class_names), columns=list(class_names))
        frame.index.name = "true\\predicted"
        path = directory / f"confusion_domain_{domain}.csv"
        frame.to_csv(path)
        paths.append(path)
    return paths


def plot_f1_evolution(records: Sequence[Mapping[str, Any]], path: Union[str, Path]) -> Path:
    """
    Grouped bars of per-domain F1 after every training phase, averaged over
    the given experiment records (one per seed).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for record in records:
        for position, point in enumerate(record.get("f1_evolution", [])):
            label = f"{point['after_phase']}@{point['domain_trained']}"
            for domain, score in point["per_domain_f1"].items():
                rows.append({"position": position, "phase": label, "domain": int(domain), "f1": score})
    fig, ax = plt.subplots(figsize=(max(6, 1.5 * (1 + len({r['position'] for r in rows}))), 4))
    if rows:
        frame = pd.DataFrame(rows)
        mean = frame.groupby(["position", "phase", "domain"])["f1"].mean().unstack("domain")
        mean.index = [phase for _, phase in mean.index]
        mean.plot.bar(ax=ax, rot=30)
        ax.legend(title="domain")
    ax.set_ylim(0, 1)
    ax.set_ylabel("weighted F1")
    ax.set_title("Per-domain F1 after each phase")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def summarize_seeds(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    """
    Mean and std over seeds of per-domain, per-class and overall F1 (in %).

    Returns:
        DataFrame indexed by metric with columns mean, std, formatted
    """
    if not reports:
        raise ValidationError("summarize_seeds needs at least one report")
    rows: Dict[str, List[float]] = {}
    for report in reports:
        for domain, score in sorted(report.per_domain_f1.items()):
            rows.setdefault(f"domain_{domain}", []).append(100.0 * score)
        for name, score in report.per_class_f1.items():
            rows.setdefault(f"class_{name}" if not name.startswith("class_") else name, []).append(100.0 * score)
        rows.setdefault("overall", []).append(100.0 * report.overall_f1)
    frame = pd.DataFrame(
        {
            "mean": {k: float(np.mean(v)) for k, v in rows.items()},
            "std": {k: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for k, v in rows.items()},
            "seeds": {k: len(v) for k, v in rows.items()},
        }
    )
    frame["formatted"] = [f"{m:.1f} ± {s:.1f}" for m, s in zip(frame["mean"], frame["std"])]
    frame.index.name = "metric"
    return frame


def format_summary_table(frame: pd.DataFrame) -> str:
    """Aligned plain-text rendering of a summarize_seeds table."""
    return frame[["formatted", "seeds"]].rename(columns={"formatted": "F1 (mean ± std)"}).to_string()


def write_summary(frame: pd.DataFrame, directory: Union[str, Path], stem: str = "summary") -> Tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    txt_path = directory / f"{stem}.txt"
    frame.to_csv(csv_path, float_format="%.6f")
    txt_path.write_text(format_summary_table(frame) + "\n", encoding="utf-8")
    return txt_path, csv_path
