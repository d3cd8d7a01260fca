"""Planar three-body orbits that keep a large potential for all time."""

__version__ = "0.1.0"
