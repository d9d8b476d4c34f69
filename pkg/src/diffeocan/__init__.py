"""Diffeomorphism-equivariant wrappers for image models via energy-based canonicalisation."""

__version__ = "0.1.0"
