"""Silver explanation signals for intent classification corpora."""

__version__ = "0.1.0"
