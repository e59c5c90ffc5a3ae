"""Joint face-model fitting and outlier segmentation on synthetic data."""

__version__ = "0.1.0"
