"""Sparse point-cloud semantic segmentation via multi-domain neighborhood
embedding and weighting, with a synthetic LiDAR benchmark and CLI."""

from mnew.backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
