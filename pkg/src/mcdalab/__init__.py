"""Blended-target domain adaptation with uncertainty-gated categorical alignment."""

__version__ = "0.1.0"
