"""Tile data model, preprocessing, splits, file formats, synthetic data."""

from chromatile.data.tiles import (
    Band,
    MultispectralTile,
    read_tile,
    select_bands,
    write_tile,
)
from chromatile.data.preprocess import (
    AUGMENT_OPS,
    NormalizationStats,
    augment,
    compute_normalization_stats,
    compute_percentiles,
    percentile_normalize,
    resample_cubic,
    stack_bands,
)
from chromatile.data.splits import (
    DatasetManifest,
    ManifestEntry,
    load_manifest,
    save_manifest,
    split_dataset,
    stratified_holdout,
    subsample_budget,
)
from chromatile.data.synthetic import (
    SyntheticConfig,
    TileTruth,
    generate_synthetic_dataset,
    load_dataset,
)

__all__ = [
    "Band",
    "MultispectralTile",
    "read_tile",
    "write_tile",
    "select_bands",
    "AUGMENT_OPS",
    "NormalizationStats",
    "augment",
    "compute_normalization_stats",
    "compute_percentiles",
    "percentile_normalize",
    "resample_cubic",
    "stack_bands",
    "DatasetManifest",
    "ManifestEntry",
    "load_manifest",
    "save_manifest",
    "split_dataset",
    "stratified_holdout",
    "subsample_budget",
    "SyntheticConfig",
    "TileTruth",
    "generate_synthetic_dataset",
    "load_dataset",
]
