"""Clutter scoring, cluttered scenario generation and policy evaluation for tabletop manipulation."""

__version__ = "0.1.0"
