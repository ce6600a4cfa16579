"""Attention-guided token masking for multi-view image-text contrastive training."""

__version__ = "0.1.0"
