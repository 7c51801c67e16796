"""Prototype-based memory network for multi-label scene recognition."""

__version__ = "0.1.0"
