"""Posterior-sampling image denoisers trained as conditional Wasserstein GANs."""

__version__ = "0.1.0"
