"""Aspect-aware multi-modal knowledge graph toolkit."""

__version__ = "0.1.0"
