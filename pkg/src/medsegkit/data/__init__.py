"""Data pipeline: image I/O, tensor archives, datasets, and inspection."""

from .archive import ArchiveError, fast_load, fast_save
from .datasets import (
    ArrayDataset,
    BinarizedDataset,
    DatasetError,
    MergedDataset,
    NNUNetDataset,
    SubsetView,
    SupervisedDataset,
)
from .inspection import (
    CaseAnnotation,
    InspectionReport,
    RandomROIDataset,
    inspect,
)
from .io import (
    FormatError,
    ImageFormat,
    ImageIOError,
    ImageVolume,
    SUPPORTED_EXTENSIONS,
    load_image,
    resample_isotropic,
    save_image,
)

__all__ = [
    "ArchiveError",
    "ArrayDataset",
    "BinarizedDataset",
    "CaseAnnotation",
    "DatasetError",
    "FormatError",
    "ImageFormat",
    "ImageIOError",
    "ImageVolume",
    "InspectionReport",
    "MergedDataset",
    "NNUNetDataset",
    "RandomROIDataset",
    "SUPPORTED_EXTENSIONS",
    "SubsetView",
    "SupervisedDataset",
    "fast_load",
    "fast_save",
    "inspect",
    "load_image",
    "resample_isotropic",
    "save_image",
]
