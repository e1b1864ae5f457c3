"""Condition-number analysis for feed-forward neural networks."""

__version__ = "0.1.0"
