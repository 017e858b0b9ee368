"""Small GAN toolkit on a from-scratch reverse-mode autodiff engine."""

__version__ = "0.1.0"
