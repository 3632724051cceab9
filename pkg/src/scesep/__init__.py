"""Monaural speaker separation with source-contrastive embedding training."""

__version__ = "0.1.0"
