"""Semi-supervised customs fraud detection on transaction graphs."""

__version__ = "0.1.0"
