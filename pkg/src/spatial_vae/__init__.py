"""Variational autoencoders whose generator is a function of pixel coordinates."""

__version__ = "0.1.0"
