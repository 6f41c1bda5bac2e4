"""Reduced sharp-interface model of austenite-martensite branching patterns."""

__version__ = "0.1.0"
