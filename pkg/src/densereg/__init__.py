"""Dense template correspondence by quantized regression."""

__version__ = "0.1.0"
