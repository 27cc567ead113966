"""Few-shot, parameter-efficient adaptation of volumetric segmentation models."""

__version__ = "0.1.0"
