"""Auxiliary-task image classification: none, image reconstruction, or Fourier targets."""

__version__ = "0.1.0"
