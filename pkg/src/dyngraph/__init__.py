"""Two-modality dynamic graph scene recognition with adaptive node selection."""

__version__ = "0.1.0"
