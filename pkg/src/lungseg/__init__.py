"""Lung segmentation of chest radiographs with a NumPy U-Net."""

__version__ = "0.1.0"
