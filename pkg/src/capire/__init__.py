"""Leakage-aware trajectory features, archetype discovery and early warning."""

__version__ = "0.1.0"
