"""Graph classification under symmetric label noise with backward loss correction."""

__version__ = "0.1.0"
