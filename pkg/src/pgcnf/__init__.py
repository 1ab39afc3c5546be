"""Continuous normalizing flows trained with flow matching and forward-KL path gradients."""

__version__ = "0.1.0"
