"""Multi-view integration attention for irregular clinical time series."""

from ._core import (
    Dataset,
    MiamError,
    auc,
    auprc,
    compute_intervals,
    config_fingerprint,
    config_values,
    cross_validate,
    fit_and_score,
    focal_term,
    generate_synthetic,
    gradcheck,
    load_dataset,
    load_physionet,
    main,
    make_folds,
    save_dataset,
    time_embedding,
)

__all__ = [
    "Dataset",
    "MiamError",
    "auc",
    "auprc",
    "compute_intervals",
    "config_fingerprint",
    "config_values",
    "cross_validate",
    "fit_and_score",
    "focal_term",
    "generate_synthetic",
    "gradcheck",
    "load_dataset",
    "load_physionet",
    "main",
    "make_folds",
    "save_dataset",
    "time_embedding",
]
