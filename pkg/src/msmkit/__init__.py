"""Multistate event-history estimation toolkit."""

__version__ = "0.1.0"
