"""Time-guided graph neural ODEs for sequential recommendation."""

__version__ = "0.1.0"
