"""Prediction difference analysis: signed relevance maps for classifier decisions."""

__version__ = "0.1.0"
