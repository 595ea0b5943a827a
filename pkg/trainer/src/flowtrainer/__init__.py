"""Quantization-aware trainer for the split early-exit flow classifier."""

__version__ = "0.1.0"
