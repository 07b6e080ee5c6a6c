"""Knee osteoarthritis detection from landmark geometry and bone texture."""

__version__ = "0.1.0"
