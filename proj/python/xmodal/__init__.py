"""Cross-modality association toolkit: modality-aware Jaccard distance,
clustering, prototype memories and two-stage training on synthetic data."""

from ._xmodal import (
    DataError,
    NumericError,
    UsageError,
    ari,
    cluster_global,
    cmc_map,
    cosine_distance,
    dbscan,
    generate,
    intra_infonce,
    jaccard_distance,
    knn_composition,
    main,
    train,
)

__all__ = [
    "DataError",
    "NumericError",
    "UsageError",
    "ari",
    "cluster_global",
    "cmc_map",
    "cosine_distance",
    "dbscan",
    "generate",
    "intra_infonce",
    "jaccard_distance",
    "knn_composition",
    "main",
    "train",
]
