"""Evaluation pipeline, BD tables, plots and the command-line interface."""

from .evaluate import (
    EvalReport,
    ExternalSystem,
    LearnedSystem,
    compare,
    image_seed,
    import_external_curve,
    import_external_curves,
    row_results,
    run_eval,
    table_from_json,
    table_to_json,
)
from .manifest import DatasetManifest, ManifestEntry, synthetic_manifest
from .metrics import (
    MetricPlugin,
    builtin_metrics,
    external_metric,
    get_metrics,
    load_scores,
    ms_ssim,
    mse,
    psnr,
)
from .plots import plot_rp, read_plot_metadata

__all__ = [
    "DatasetManifest",
    "EvalReport",
    "ExternalSystem",
    "LearnedSystem",
    "ManifestEntry",
    "MetricPlugin",
    "builtin_metrics",
    "compare",
    "external_metric",
    "get_metrics",
    "image_seed",
    "import_external_curve",
    "import_external_curves",
    "load_scores",
    "ms_ssim",
    "mse",
    "plot_rp",
    "psnr",
    "read_plot_metadata",
    "row_results",
    "run_eval",
    "synthetic_manifest",
    "table_from_json",
    "table_to_json",
]
