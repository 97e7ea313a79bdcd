"""Desk-scale audio-driven portrait animation with hierarchical audio-driven visual synthesis."""

__version__ = "0.1.0"
