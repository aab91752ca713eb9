"""Kinodynamic retargeting of motion-capture kicks onto a humanoid model."""

__version__ = "0.1.0"
