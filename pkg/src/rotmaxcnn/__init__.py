"""Rotation-aware hierarchical max-pooling CNN classifiers."""

__version__ = "0.1.0"
