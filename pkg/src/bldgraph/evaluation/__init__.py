"""Metrics, class-balance diagnostics, paired significance tests and embedding export."""
from .compare import ComparisonReport, MetricComparison, compare_metric, compare_models
from .embeddings import embedding_table, export_embeddings, read_embeddings
from .metrics import (METRICS, REPORT_SPLITS, ConfusionMatrix, MetricsReport, SplitMetrics, confusion,
                      macro_metrics, metrics_report, shannon_equitability)
from .stats import DegenerateSampleError, paired_t_test, wilcoxon_signed_rank

__all__ = [
    "METRICS", "REPORT_SPLITS", "ComparisonReport", "ConfusionMatrix", "DegenerateSampleError",
    "MetricComparison", "MetricsReport", "SplitMetrics", "compare_metric", "compare_models", "confusion",
    "embedding_table", "export_embeddings", "macro_metrics", "metrics_report", "paired_t_test",
    "read_embeddings", "shannon_equitability", "wilcoxon_signed_rank",
]
