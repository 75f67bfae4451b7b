"""Desk-scale multimodal masked-latent pretraining with frozen projection targets."""

__version__ = "0.1.0"
