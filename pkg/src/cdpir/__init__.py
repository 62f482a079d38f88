"""Sparse-view CT reconstruction with cross-distribution diffusion priors."""

__version__ = "0.1.0"
