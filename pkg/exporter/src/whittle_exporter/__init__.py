"""whittle-exporter: bridge real checkpoints into whittle's file formats."""

from .export import (
    DEFAULT_EXCLUDE,
    DEFAULT_INCLUDE,
    ExportError,
    ExportRecipe,
    export_grams,
    export_weights,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_EXCLUDE",
    "DEFAULT_INCLUDE",
    "ExportError",
    "ExportRecipe",
    "export_grams",
    "export_weights",
]
