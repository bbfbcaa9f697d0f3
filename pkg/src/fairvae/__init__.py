"""Fairness-aware VAE recommenders for users unseen during training."""

__version__ = "0.1.0"
