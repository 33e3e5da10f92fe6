"""Learned particle-fluid simulator with rigid-body interaction and control."""

__version__ = "0.1.0"
