"""Latent video transformer: discrete frame codec plus subscaled autoregressive prior."""

__version__ = "0.1.0"
