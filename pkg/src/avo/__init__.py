"""Desk-scale automatic voice over via discrete speech unit prediction."""

__version__ = "0.1.0"
