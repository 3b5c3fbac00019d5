"""Keras model and image-batch conversion into hptq containers."""

from .export import ExportManifest, UnsupportedLayerError, build_source, convert_model, export_model
from .pack import pack_dataset

__version__ = "0.1.0"

__all__ = [
    "ExportManifest",
    "UnsupportedLayerError",
    "build_source",
    "convert_model",
    "export_model",
    "pack_dataset",
]
