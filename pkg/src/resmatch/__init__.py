"""Generative latent-space parameterizations with ensemble history matching."""

__version__ = "0.1.0"
