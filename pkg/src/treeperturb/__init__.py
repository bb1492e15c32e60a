"""Targeted adversarial text via perturbations of a dependency-tree autoencoder."""

__version__ = "0.1.0"
