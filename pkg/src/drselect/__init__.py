"""Selective machine learning for doubly robust functionals."""

__version__ = "0.1.0"
