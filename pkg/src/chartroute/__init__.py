"""Mixture-of-experts chart connector toolkit."""

__version__ = "0.1.0"
