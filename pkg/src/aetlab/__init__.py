"""Transformation-equivariant representation learning by autoencoding transformations."""

__version__ = "0.1.0"
