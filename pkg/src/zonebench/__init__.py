"""Desk-scale benchmark of six U-Net-family models for prostate zone segmentation."""

__version__ = "0.1.0"
