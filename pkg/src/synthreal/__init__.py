"""Synthetic-to-realistic face translation with identity preservation, at toy scale."""

__version__ = "0.1.0"
