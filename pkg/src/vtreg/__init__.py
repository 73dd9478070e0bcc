"""Unsupervised visible/thermal affine registration with a ViT spatial transformer."""

__version__ = "0.1.0"
