"""Transaction-to-merchant resolution with small from-scratch transformers."""

__version__ = "0.1.0"
