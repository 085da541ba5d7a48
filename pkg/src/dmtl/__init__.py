"""Shared-encoder 3-D U-Net segmentation with an auxiliary classifier, on a NumPy autodiff core."""

__version__ = "0.1.0"
