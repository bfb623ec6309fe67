"""Confidence-score purification defense, attack suite, and evaluation harness."""

__version__ = "0.1.0"
