"""Keypoint-based pose normalization for fine-grained classification."""

__version__ = "0.1.0"
