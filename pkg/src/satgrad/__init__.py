"""Saturated-network gradient masking laboratory."""

__version__ = "0.1.0"
