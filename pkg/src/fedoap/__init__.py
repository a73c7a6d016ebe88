"""Personalized federated learning for binary segmentation."""

__version__ = "0.1.0"
