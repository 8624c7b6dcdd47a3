"""Latent-conditioned physics-informed networks for parametric PDE families."""

__version__ = "0.1.0"
