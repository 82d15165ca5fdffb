"""Canonical 3D shape, camera and texture reconstruction from single images."""

__version__ = "0.1.0"
