"""Stochastic accumulation of diffusion-style detections and weighted pseudo-label training."""

__version__ = "0.1.0"

VOCAB = ("person", "car", "bus", "truck")
