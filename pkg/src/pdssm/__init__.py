"""State-space models with one-hot-column times diagonal transitions."""

__version__ = "0.1.0"
