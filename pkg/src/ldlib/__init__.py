"""Recover label distributions from logical labels with a variational latent model."""

__version__ = "0.1.0"
