"""Metrics, reports and embedding export."""

from .embeddings import export_embeddings
from .metrics import davies_bouldin, per_class_f1, sliced_wasserstein, wasserstein_alignment, weighted_f1
from .report import (
    MetricsReport,
    evaluate,
    evaluation_labels,
    format_summary_table,
    plot_f1_evolution,
    predict,
    read_report,
    summarize_seeds,
    write_confusion_matrices,
    write_report,
    write_summary,
)

__all__ = [
    "MetricsReport",
    "davies_bouldin",
    "evaluate",
    "evaluation_labels",
    "export_embeddings",
    "format_summary_table",
    "per_class_f1",
    "plot_f1_evolution",
    "predict",
    "read_report",
    "sliced_wasserstein",
    "summarize_seeds",
    "wasserstein_alignment",
    "weighted_f1",
    "write_confusion_matrices",
    "write_report",
    "write_summary",
]
