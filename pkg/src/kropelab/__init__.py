"""Tabular laboratory for KROPE representations and offline value-function stability."""

__version__ = "0.1.0"
