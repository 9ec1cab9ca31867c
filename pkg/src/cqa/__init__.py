"""Concept-quality evaluation toolkit for concept bottleneck models."""
__version__ = "0.1.0"
