"""Multiscale convolutional transformer with center-mask pretraining for hyperspectral classification."""

__version__ = "0.1.0"
