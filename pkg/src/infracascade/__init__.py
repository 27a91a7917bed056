"""Cascading-failure prediction on interdependent infrastructure networks."""

__version__ = "0.1.0"
